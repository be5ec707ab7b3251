/**
 * Wire-format schemas shared by every module in the client.
 *
 * The shapes mirror the JSON payloads of the judgment collection service:
 * task assignment, the image-revealing second stage, the final judgment
 * record, and the acknowledgement returned for a submission. Everything
 * that crosses the network is parsed through these schemas so a drifting
 * server contract fails loudly instead of corrupting session state.
 */
import { z } from "zod";

export const LABELS = ["yes", "weak_yes", "weak_no", "no"] as const;

export const labelSchema = z.enum(LABELS);

export type Label = z.infer<typeof labelSchema>;

/** Human-facing text for each wire label, in widget order. */
export const LABEL_DISPLAY: Record<Label, string> = {
  yes: "yes",
  weak_yes: "weak yes",
  weak_no: "weak no",
  no: "no",
};

export const phraseListsSchema = z.object({
  nouns: z.array(z.string()),
  noun_phrases: z.array(z.string()),
  verb_phrases: z.array(z.string()),
});

export type PhraseLists = z.infer<typeof phraseListsSchema>;

/** First-stage task payload. Deliberately contains no image reference. */
export const taskPayloadSchema = z
  .object({
    item_id: z.string().min(1),
    question: z.string(),
    answer: z.string(),
    rationale: z.string(),
    offered_phrases: phraseListsSchema,
    lease_expires: z.number(),
  })
  .strict();

export type TaskPayload = z.infer<typeof taskPayloadSchema>;

/** Second-stage payload, available only after the textual answer is stored. */
export const fullTaskPayloadSchema = z
  .object({
    item_id: z.string().min(1),
    question: z.string(),
    answer: z.string(),
    rationale: z.string(),
    offered_phrases: phraseListsSchema,
    image_url: z.string().min(1),
  })
  .strict();

export type FullTaskPayload = z.infer<typeof fullTaskPayloadSchema>;

export const judgmentRecordSchema = z
  .object({
    item_id: z.string().min(1),
    worker_id: z.string().min(1),
    textual_plausibility: labelSchema,
    visual_plausibility: labelSchema,
    grammatical: labelSchema,
    unrelated_content: labelSchema,
    unrelated_phrases: z.array(z.string()),
    timestamp: z.number(),
  })
  .strict();

export type JudgmentRecord = z.infer<typeof judgmentRecordSchema>;

export const ackSchema = z
  .object({
    status: z.literal("accepted"),
    item_id: z.string(),
    worker_id: z.string(),
    sequence: z.number().int().nonnegative(),
  })
  .strict();

export type Ack = z.infer<typeof ackSchema>;

/** Every phrase a worker may pick, flattened in presentation order. */
export function allOfferedPhrases(phrases: PhraseLists): string[] {
  return [...phrases.nouns, ...phrases.noun_phrases, ...phrases.verb_phrases];
}

/**
 * Per-task view state machine.
 *
 * A task walks through six stages in a fixed order:
 *
 *   TEXT_ONLY -> WITH_IMAGE -> GRAMMAR -> FIDELITY -> PHRASES -> DONE
 *
 * Transitions only ever move one stage forward. The image URL cannot be
 * attached while the task is still in TEXT_ONLY without the textual answer
 * recorded, so no render of the first stage can ever show the image.
 */
import type { Label, TaskPayload } from "./schema.js";
import { allOfferedPhrases } from "./schema.js";

export const STAGES = [
  "TEXT_ONLY",
  "WITH_IMAGE",
  "GRAMMAR",
  "FIDELITY",
  "PHRASES",
  "DONE",
] as const;

export type Stage = (typeof STAGES)[number];

export class FlowError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "FlowError";
  }
}

/** Answers collected so far for the current task. */
export interface PendingAnswers {
  textual?: Label;
  visual?: Label;
  grammatical?: Label;
  unrelatedContent?: Label;
  unrelatedPhrases: string[];
}

export class TaskView {
  readonly task: TaskPayload;
  readonly answers: PendingAnswers;
  private currentStage: Stage;
  private revealedImageUrl: string | null;

  constructor(task: TaskPayload) {
    this.task = task;
    this.answers = { unrelatedPhrases: [] };
    this.currentStage = "TEXT_ONLY";
    this.revealedImageUrl = null;
  }

  get stage(): Stage {
    return this.currentStage;
  }

  /** URL of the revealed image, or null while the task is image-blind. */
  get imageUrl(): string | null {
    return this.revealedImageUrl;
  }

  get imageVisible(): boolean {
    return this.currentStage !== "TEXT_ONLY" && this.revealedImageUrl !== null;
  }

  /** Move exactly one stage forward; anything else is a flow bug. */
  advance(next: Stage): void {
    const from = STAGES.indexOf(this.currentStage);
    const to = STAGES.indexOf(next);
    if (to !== from + 1) {
      throw new FlowError(
        `cannot move from ${this.currentStage} to ${next}; stages are strictly sequential`,
      );
    }
    if (next !== "DONE" && next !== "TEXT_ONLY" && this.revealedImageUrl === null) {
      throw new FlowError("image must be revealed before leaving TEXT_ONLY");
    }
    this.currentStage = next;
  }

  /** Attach the image URL; legal only once the textual answer is stored. */
  revealImage(url: string): void {
    if (this.currentStage !== "TEXT_ONLY") {
      throw new FlowError("image is revealed exactly once, after the textual stage");
    }
    if (this.answers.textual === undefined) {
      throw new FlowError("textual answer must be recorded before the image is revealed");
    }
    this.revealedImageUrl = url;
  }

  /** Validate a phrase pick against the lists the server offered. */
  checkPhrases(picked: string[]): void {
    const offered = new Set(allOfferedPhrases(this.task.offered_phrases));
    for (const phrase of picked) {
      if (!offered.has(phrase)) {
        throw new FlowError(`phrase was never offered: ${JSON.stringify(phrase)}`);
      }
    }
  }
}

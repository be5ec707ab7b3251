import type { JudgmentRecord, Label } from "../src/schema.js";

export function jsonResponse(status: number, body: unknown): Response {
  if (status === 204) {
    return new Response(null, { status });
  }
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

export function makeRecord(overrides: Partial<JudgmentRecord> = {}): JudgmentRecord {
  return {
    item_id: "item-0",
    worker_id: "w1",
    textual_plausibility: "yes" as Label,
    visual_plausibility: "yes" as Label,
    grammatical: "yes" as Label,
    unrelated_content: "no" as Label,
    unrelated_phrases: [],
    timestamp: 1700000000,
    ...overrides,
  };
}

export function ackFor(record: JudgmentRecord, sequence = 0): unknown {
  return {
    status: "accepted",
    item_id: record.item_id,
    worker_id: record.worker_id,
    sequence,
  };
}

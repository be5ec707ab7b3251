/**
 * Optimistic retry queue for judgment submissions.
 *
 * A record that fails to reach the service (network error, 5xx) is kept
 * locally and retried on the next flush. Resubmission is safe because the
 * service acknowledges duplicates idempotently. A 409 means the item
 * filled up while the record sat in the queue; the record is dropped and
 * surfaced through the flush report so the UI can notify the worker.
 */
import type { ApiClient } from "./api.js";
import { ApiError } from "./api.js";
import type { JudgmentRecord } from "./schema.js";

export interface FlushReport {
  delivered: number;
  dropped: number;
  remaining: number;
}

export class RetryQueue {
  private readonly api: ApiClient;
  private pending: JudgmentRecord[];

  constructor(api: ApiClient) {
    this.api = api;
    this.pending = [];
  }

  get size(): number {
    return this.pending.length;
  }

  push(record: JudgmentRecord): void {
    this.pending.push(record);
  }

  /** Try to deliver everything queued; keep whatever still fails. */
  async flush(): Promise<FlushReport> {
    const kept: JudgmentRecord[] = [];
    let delivered = 0;
    let dropped = 0;
    for (const record of this.pending) {
      try {
        await this.api.submitJudgment(record);
        delivered += 1;
      } catch (error) {
        if (error instanceof ApiError && error.status === 409) {
          dropped += 1;
        } else {
          kept.push(record);
        }
      }
    }
    this.pending = kept;
    return { delivered, dropped, remaining: kept.length };
  }
}

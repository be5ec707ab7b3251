/**
 * Thin HTTP client for the judgment collection service.
 *
 * The fetch implementation is injected so tests can drive the client
 * against an in-memory service. All responses are validated with the
 * schemas from schema.js before they reach session state.
 */
import {
  ackSchema,
  fullTaskPayloadSchema,
  judgmentRecordSchema,
  taskPayloadSchema,
  type Ack,
  type FullTaskPayload,
  type JudgmentRecord,
  type Label,
  type TaskPayload,
} from "./schema.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Raised for any non-success HTTP status; carries the status code. */
export class ApiError extends Error {
  readonly status: number;

  constructor(message: string, status: number) {
    super(message);
    this.name = "ApiError";
    this.status = status;
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") {
      return body.detail;
    }
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `request failed with status ${response.status}`;
}

export class ApiClient {
  private readonly fetchImpl: FetchLike;
  private readonly base: string;

  constructor(fetchImpl: FetchLike, base = "") {
    this.fetchImpl = fetchImpl;
    this.base = base.replace(/\/$/, "");
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchImpl(`${this.base}${path}`, init);
    if (!response.ok && response.status !== 204) {
      throw new ApiError(await errorDetail(response), response.status);
    }
    return response;
  }

  /** Fetch the next assignment, or null when the queue is exhausted. */
  async nextTask(workerId: string): Promise<TaskPayload | null> {
    const response = await this.request(
      `/task?worker=${encodeURIComponent(workerId)}`,
    );
    if (response.status === 204) {
      return null;
    }
    return taskPayloadSchema.parse(await response.json());
  }

  /** Store the image-blind plausibility answer for this worker and item. */
  async submitTextual(
    itemId: string,
    workerId: string,
    label: Label,
  ): Promise<void> {
    await this.request(`/task/${encodeURIComponent(itemId)}/textual`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ worker_id: workerId, label }),
    });
  }

  /** Fetch the image-bearing view; the server rejects this before submitTextual. */
  async fullTask(itemId: string, workerId: string): Promise<FullTaskPayload> {
    const response = await this.request(
      `/task/${encodeURIComponent(itemId)}/full?worker=${encodeURIComponent(workerId)}`,
    );
    return fullTaskPayloadSchema.parse(await response.json());
  }

  /** Submit a completed judgment; resubmission returns the original ack. */
  async submitJudgment(record: JudgmentRecord): Promise<Ack> {
    const payload = judgmentRecordSchema.parse(record);
    const response = await this.request(
      `/task/${encodeURIComponent(payload.item_id)}/judgment`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(payload),
      },
    );
    return ackSchema.parse(await response.json());
  }
}

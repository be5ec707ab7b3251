/**
 * Session controller: one worker, one active task at a time.
 *
 * The controller owns the ordering guarantees of the flow. In particular
 * the textual answer is POSTed and acknowledged before the image-bearing
 * view is requested, so the image endpoint is never touched while a task
 * is image-blind. Completed judgments that fail to send are parked in a
 * retry queue; expired leases abandon the task with a notice.
 */
import { ApiClient, ApiError } from "./api.js";
import { RetryQueue } from "./retry.js";
import type { JudgmentRecord, Label } from "./schema.js";
import { FlowError, TaskView, type Stage } from "./state.js";

export class LeaseExpiredError extends Error {
  readonly itemId: string;

  constructor(itemId: string) {
    super(`lease expired for ${itemId}; the task was abandoned`);
    this.name = "LeaseExpiredError";
    this.itemId = itemId;
  }
}

export type SessionPhase = "idle" | "working" | "exhausted";

export type Clock = () => number;

export class SessionController {
  readonly workerId: string;
  readonly retry: RetryQueue;
  /** Local copies of every judgment built this session, sent or queued. */
  readonly submitted: JudgmentRecord[];
  notices: string[];
  view: TaskView | null;
  phase: SessionPhase;
  private readonly api: ApiClient;
  private readonly clock: Clock;

  constructor(api: ApiClient, workerId: string, clock: Clock = () => Date.now() / 1000) {
    if (!workerId) {
      throw new FlowError("worker id must be non-empty");
    }
    this.api = api;
    this.workerId = workerId;
    this.clock = clock;
    this.retry = new RetryQueue(api);
    this.submitted = [];
    this.notices = [];
    this.view = null;
    this.phase = "idle";
  }

  /** Request the next assignment; null means the queue is exhausted. */
  async nextTask(): Promise<TaskView | null> {
    if (this.view !== null) {
      throw new FlowError("a task is already active in this session");
    }
    const task = await this.api.nextTask(this.workerId);
    if (task === null) {
      this.phase = "exhausted";
      return null;
    }
    this.view = new TaskView(task);
    this.phase = "working";
    return this.view;
  }

  /** Drop the active task without submitting anything. */
  abandon(): void {
    if (this.view !== null) {
      this.notices.push(`task ${this.view.task.item_id} abandoned`);
      this.view = null;
    }
  }

  private requireStage(stage: Stage): TaskView {
    if (this.view === null) {
      throw new FlowError("no task is active");
    }
    if (this.view.stage !== stage) {
      throw new FlowError(
        `expected stage ${stage} but the task is in ${this.view.stage}`,
      );
    }
    if (this.clock() > this.view.task.lease_expires) {
      const itemId = this.view.task.item_id;
      this.view = null;
      this.notices.push(`lease expired for ${itemId}; task abandoned`);
      throw new LeaseExpiredError(itemId);
    }
    return this.view;
  }

  /**
   * Record the image-blind plausibility answer, then reveal the image.
   * The POST is awaited before the image-bearing view is fetched.
   */
  async answerTextual(label: Label): Promise<void> {
    const view = this.requireStage("TEXT_ONLY");
    await this.api.submitTextual(view.task.item_id, this.workerId, label);
    view.answers.textual = label;
    const full = await this.api.fullTask(view.task.item_id, this.workerId);
    view.revealImage(full.image_url);
    view.advance("WITH_IMAGE");
  }

  answerVisual(label: Label): void {
    const view = this.requireStage("WITH_IMAGE");
    view.answers.visual = label;
    view.advance("GRAMMAR");
  }

  answerGrammar(label: Label): void {
    const view = this.requireStage("GRAMMAR");
    view.answers.grammatical = label;
    view.advance("FIDELITY");
  }

  answerUnrelated(label: Label): void {
    const view = this.requireStage("FIDELITY");
    view.answers.unrelatedContent = label;
    view.advance("PHRASES");
  }

  /** Finish the task: build the record, submit it, queue it on failure. */
  async submitPhrases(picked: string[]): Promise<JudgmentRecord> {
    const view = this.requireStage("PHRASES");
    view.checkPhrases(picked);
    view.answers.unrelatedPhrases = [...picked];
    const record = this.buildRecord(view);
    view.advance("DONE");
    this.view = null;
    this.submitted.push(record);
    try {
      await this.api.submitJudgment(record);
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.notices.push(
          `item ${record.item_id} was completed by other workers; judgment discarded`,
        );
      } else {
        this.retry.push(record);
        this.notices.push(
          `submission for ${record.item_id} failed; it will be retried`,
        );
      }
    }
    return record;
  }

  private buildRecord(view: TaskView): JudgmentRecord {
    const { textual, visual, grammatical, unrelatedContent, unrelatedPhrases } =
      view.answers;
    if (
      textual === undefined ||
      visual === undefined ||
      grammatical === undefined ||
      unrelatedContent === undefined
    ) {
      throw new FlowError("cannot build a record from an incomplete task");
    }
    return {
      item_id: view.task.item_id,
      worker_id: this.workerId,
      textual_plausibility: textual,
      visual_plausibility: visual,
      grammatical,
      unrelated_content: unrelatedContent,
      unrelated_phrases: unrelatedPhrases,
      timestamp: this.clock(),
    };
  }
}

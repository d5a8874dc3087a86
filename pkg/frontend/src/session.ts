/**
 * Annotation session state machine.
 *
 * One task is on screen at a time. Choosing a category posts the response
 * and advances; while the submission is in flight the choice may still be
 * replaced (the service accepts revisions until the next task is issued),
 * but once the next task arrives the previous item is immutable and there
 * is no undo. A failed POST is kept as the pending choice and retried until
 * acknowledged, so nothing is lost offline; the service deduplicates by
 * (image, annotator), so retries never create duplicates.
 */

import { ApiClient, ApiError } from "./api.js";
import { assertBijectiveKeymap, codeForKey } from "./keymap.js";
import { TaskView } from "./types.js";

export type SessionPhase =
  | "idle" | "loading" | "annotating" | "submitting" | "retry-wait"
  | "done" | "failed";

export interface SessionTotals {
  submitted: number;
  revised: number;
  retries: number;
}

export interface SessionEvents {
  onTask?(task: TaskView): void;
  onPhase?(phase: SessionPhase): void;
  onRetry?(attempt: number, delayMs: number): void;
  onDone?(totals: SessionTotals): void;
  onError?(error: unknown): void;
}

export interface SessionOptions {
  retryDelayMs?: number;
  maxRetries?: number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export class AnnotateSession {
  phase: SessionPhase = "idle";
  current: TaskView | null = null;
  readonly totals: SessionTotals = { submitted: 0, revised: 0, retries: 0 };
  private pendingChoice: number | null = null;
  private readonly completed = new Set<string>();
  private readonly retryDelayMs: number;
  private readonly maxRetries: number;
  private readonly sleep: (ms: number) => Promise<void>;

  constructor(
    private readonly api: ApiClient,
    readonly annotator: string,
    private readonly events: SessionEvents = {},
    options: SessionOptions = {},
  ) {
    if (!annotator) {
      throw new Error("annotator id required");
    }
    this.retryDelayMs = options.retryDelayMs ?? 1500;
    this.maxRetries = options.maxRetries ?? Number.POSITIVE_INFINITY;
    this.sleep = options.sleep ?? defaultSleep;
  }

  async start(): Promise<void> {
    await this.advance();
  }

  /** Route a raw keyboard key; returns true when it selected a category. */
  async handleKey(key: string): Promise<boolean> {
    const code = codeForKey(key);
    if (code === null || this.current === null) {
      return false;
    }
    if (!this.current.categories.some((c) => c.code === code)) {
      return false;
    }
    await this.choose(code);
    return true;
  }

  /** Choose a category for the on-screen task (exactly one per submission). */
  async choose(code: number): Promise<void> {
    if (this.current === null) {
      throw new Error("no task on screen");
    }
    if (this.phase === "submitting" || this.phase === "retry-wait") {
      // the previous choice is still in flight: replace it; the submit
      // loop below re-reads pendingChoice before advancing
      if (this.pendingChoice !== null && this.pendingChoice !== code) {
        this.totals.revised += 1;
      }
      this.pendingChoice = code;
      return;
    }
    if (this.phase !== "annotating") {
      throw new Error(`cannot choose in phase ${this.phase}`);
    }
    this.pendingChoice = code;
    await this.submitLoop();
  }

  private setPhase(phase: SessionPhase) {
    this.phase = phase;
    this.events.onPhase?.(phase);
  }

  private async submitLoop(): Promise<void> {
    const task = this.current!;
    this.setPhase("submitting");
    let attempt = 0;
    let acknowledged: number | null = null;
    while (true) {
      const choice = this.pendingChoice;
      if (choice === null) {
        break;
      }
      if (choice === acknowledged) {
        break; // latest choice already stored server-side
      }
      const category = task.categories.find((c) => c.code === choice);
      try {
        await this.api.submit({
          image_id: task.image_id,
          annotator: this.annotator,
          category: category!.name,
        });
        acknowledged = choice;
        this.setPhase("submitting");
      } catch (error) {
        if (error instanceof ApiError && error.status < 500
            && error.status !== 429) {
          this.setPhase("failed");
          this.events.onError?.(error);
          throw error;
        }
        attempt += 1;
        this.totals.retries += 1;
        if (attempt > this.maxRetries) {
          this.setPhase("failed");
          this.events.onError?.(error);
          throw error;
        }
        this.setPhase("retry-wait");
        this.events.onRetry?.(attempt, this.retryDelayMs);
        await this.sleep(this.retryDelayMs);
        this.setPhase("submitting");
      }
    }
    this.completed.add(task.image_id);
    this.totals.submitted += 1;
    this.pendingChoice = null;
    await this.advance(); // previous item is immutable from here on
  }

  private async advance(): Promise<void> {
    this.setPhase("loading");
    let task: TaskView | null;
    try {
      task = await this.api.next(this.annotator);
    } catch (error) {
      this.setPhase("failed");
      this.events.onError?.(error);
      throw error;
    }
    if (task === null) {
      this.current = null;
      this.setPhase("done");
      this.events.onDone?.({ ...this.totals });
      return;
    }
    assertBijectiveKeymap(task.categories);
    if (this.completed.has(task.image_id)) {
      // defensive: the service never re-issues an answered image
      throw new Error(`service re-issued completed image ${task.image_id}`);
    }
    this.current = task;
    this.setPhase("annotating");
    this.events.onTask?.(task);
  }
}

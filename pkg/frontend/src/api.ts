/** Thin JSON client for the annotation service endpoints. */

import { sanitizeTask, TaskView } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export interface SubmitBody {
  image_id: string;
  annotator: string;
  category: string;
}

export interface SubmitResult {
  status: string;
  image_id: string;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike =
      (input, init) => globalThis.fetch(input, init),
  ) {}

  /** Next task for the annotator, or null when the batch is exhausted. */
  async next(annotator: string): Promise<TaskView | null> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/next?annotator=${encodeURIComponent(annotator)}`);
    if (resp.status === 204) {
      return null;
    }
    if (!resp.ok) {
      throw new ApiError(resp.status, await describeError(resp));
    }
    return sanitizeTask(await resp.json());
  }

  async submit(body: SubmitBody): Promise<SubmitResult> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/annotations`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, await describeError(resp));
    }
    return (await resp.json()) as SubmitResult;
  }

  async progress(annotator: string): Promise<{ done: number; total: number }> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/progress?annotator=${encodeURIComponent(annotator)}`);
    if (!resp.ok) {
      throw new ApiError(resp.status, await describeError(resp));
    }
    return (await resp.json()) as { done: number; total: number };
  }
}

async function describeError(resp: Response): Promise<string> {
  try {
    const payload = (await resp.json()) as { error?: string; detail?: string };
    return `${payload.error ?? resp.status}: ${payload.detail ?? ""}`;
  } catch {
    return `http ${resp.status}`;
  }
}

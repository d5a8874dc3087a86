/**
 * Task payload types mirroring the annotation service exactly.
 *
 * The client is blind by construction: `sanitizeTask` rejects any payload
 * carrying fields outside the documented schema, so query metadata or peer
 * annotations can never reach the rendering layer even if a misbehaving
 * server were to send them.
 */

export interface CategoryChoice {
  code: number;
  name: string;
  key: string;
}

export interface Progress {
  done: number;
  total: number;
}

export interface TaskView {
  image_id: string;
  crop_url: string;
  categories: CategoryChoice[];
  progress: Progress;
}

const TASK_FIELDS = new Set(["image_id", "crop_url", "categories", "progress"]);
const CATEGORY_FIELDS = new Set(["code", "name", "key"]);
const PROGRESS_FIELDS = new Set(["done", "total"]);

export class BlindnessViolation extends Error {}

function assertOnlyFields(obj: Record<string, unknown>, allowed: Set<string>,
                          where: string): void {
  for (const key of Object.keys(obj)) {
    if (!allowed.has(key)) {
      throw new BlindnessViolation(
        `unexpected field "${key}" in ${where}; refusing to render`);
    }
  }
}

/** Validate a raw payload into a TaskView, refusing unknown fields. */
export function sanitizeTask(raw: unknown): TaskView {
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new BlindnessViolation("task payload is not an object");
  }
  const obj = raw as Record<string, unknown>;
  assertOnlyFields(obj, TASK_FIELDS, "task");
  if (typeof obj.image_id !== "string" || typeof obj.crop_url !== "string") {
    throw new BlindnessViolation("task payload misses image_id/crop_url");
  }
  if (!Array.isArray(obj.categories) || obj.categories.length === 0) {
    throw new BlindnessViolation("task payload misses categories");
  }
  const categories = obj.categories.map((entry) => {
    if (typeof entry !== "object" || entry === null) {
      throw new BlindnessViolation("category entry is not an object");
    }
    const cat = entry as Record<string, unknown>;
    assertOnlyFields(cat, CATEGORY_FIELDS, "category");
    if (typeof cat.code !== "number" || typeof cat.name !== "string"
        || typeof cat.key !== "string") {
      throw new BlindnessViolation("malformed category entry");
    }
    return { code: cat.code, name: cat.name, key: cat.key };
  });
  const progress = obj.progress as Record<string, unknown>;
  if (typeof progress !== "object" || progress === null) {
    throw new BlindnessViolation("task payload misses progress");
  }
  assertOnlyFields(progress, PROGRESS_FIELDS, "progress");
  if (typeof progress.done !== "number" || typeof progress.total !== "number") {
    throw new BlindnessViolation("malformed progress");
  }
  return {
    image_id: obj.image_id,
    crop_url: obj.crop_url,
    categories,
    progress: { done: progress.done, total: progress.total },
  };
}

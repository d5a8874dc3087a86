/** In-memory stand-in for the annotation service, honoring its contract:
 * per-annotator task order, 204 on exhaustion, deduplication by
 * (image, annotator), and revision only while the item is current. */

import { FetchLike } from "../src/api.js";
import { keyForCode } from "../src/keymap.js";

export const CATEGORY_NAMES = [
  "neutral", "happy", "sad", "surprise", "fear", "disgust", "anger",
  "none", "uncertain", "no_face",
];

export function categoriesPayload() {
  return CATEGORY_NAMES.map((name, code) => ({
    code, name, key: keyForCode(code),
  }));
}

export class FakeService {
  responses = new Map<string, string>(); // `${image}|${annotator}` -> category
  submitCount = 0;
  nextCount = 0;
  failNextSubmits = 0; // inject network failures
  private lastIssued = new Map<string, string>();

  constructor(readonly tasks: string[]) {}

  private answered(annotator: string): string[] {
    return this.tasks.filter(
      (image) => this.responses.has(`${image}|${annotator}`));
  }

  fetch: FetchLike = async (input, init) => {
    const url = new URL(input, "http://fake.test");
    if (url.pathname === "/api/next") {
      this.nextCount += 1;
      const annotator = url.searchParams.get("annotator") ?? "";
      const done = this.answered(annotator);
      const pending = this.tasks.find(
        (image) => !this.responses.has(`${image}|${annotator}`));
      if (pending === undefined) {
        return new Response(null, { status: 204 });
      }
      this.lastIssued.set(annotator, pending);
      return json({
        image_id: pending,
        crop_url: `/api/image/${pending}/crop.png`,
        categories: categoriesPayload(),
        progress: { done: done.length, total: this.tasks.length },
      });
    }
    if (url.pathname === "/api/annotations" && init?.method === "POST") {
      if (this.failNextSubmits > 0) {
        this.failNextSubmits -= 1;
        throw new TypeError("fetch failed (network down)");
      }
      this.submitCount += 1;
      const body = JSON.parse(String(init.body)) as {
        image_id: string; annotator: string; category: string;
      };
      if (!CATEGORY_NAMES.includes(body.category)) {
        return json({ error: "ValueError", detail: "bad category" }, 400);
      }
      if (!this.tasks.includes(body.image_id)) {
        return json({ error: "KeyError", detail: "unknown image" }, 404);
      }
      const key = `${body.image_id}|${body.annotator}`;
      const existing = this.responses.get(key);
      if (existing === body.category) {
        return json({ status: "duplicate", image_id: body.image_id }, 200);
      }
      if (existing !== undefined) {
        if (this.lastIssued.get(body.annotator) !== body.image_id) {
          return json({ error: "PermissionError",
                        detail: "immutable" }, 409);
        }
        this.responses.set(key, body.category);
        return json({ status: "revised", image_id: body.image_id }, 200);
      }
      this.responses.set(key, body.category);
      return json({ status: "recorded", image_id: body.image_id }, 201);
    }
    return json({ error: "NotFound", detail: url.pathname }, 404);
  };
}

function json(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

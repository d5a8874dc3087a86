/**
 * Pure HTML builders. Everything on screen is derived from the sanitized
 * TaskView plus session counters; query metadata and peer responses do not
 * exist in that structure, so they cannot be rendered.
 */

import { SessionTotals } from "./session.js";
import { CategoryChoice, TaskView } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function categoryButton(category: CategoryChoice): string {
  const name = escapeHtml(category.name.replace(/_/g, " "));
  return `<button class="category" data-code="${category.code}">`
    + `<kbd>${escapeHtml(category.key)}</kbd> ${name}</button>`;
}

export function taskHtml(task: TaskView): string {
  const buttons = task.categories.map(categoryButton).join("\n");
  return `
<div class="task" data-image-id="${escapeHtml(task.image_id)}">
  <div class="progress">${task.progress.done} / ${task.progress.total}</div>
  <img class="crop" src="${escapeHtml(task.crop_url)}" alt="face to annotate">
  <div class="categories">${buttons}</div>
  <p class="hint">Pick the expression on the face; intensity does not
  matter. Keys 1&ndash;9 and 0 work. No undo once the next image loads.</p>
</div>`;
}

export function doneHtml(totals: SessionTotals): string {
  return `
<div class="done">
  <h2>All done</h2>
  <p>${totals.submitted} image(s) annotated this session`
    + (totals.revised ? `, ${totals.revised} revised before advancing` : "")
    + (totals.retries ? `, ${totals.retries} network retr(ies)` : "")
    + `.</p>
</div>`;
}

export function retryBannerHtml(attempt: number): string {
  return `<div class="banner">Connection trouble; retrying`
    + ` (attempt ${attempt}). Your last choice is saved and will not be`
    + ` lost or duplicated.</div>`;
}

export function loginHtml(warning: string | null): string {
  return `
<div class="login">
  <h2>wildlabel annotation</h2>
  ${warning ? `<div class="banner">${escapeHtml(warning)}</div>` : ""}
  <label>Annotator id
    <input id="annotator" autocomplete="off" autofocus>
  </label>
  <button id="start">Start</button>
</div>`;
}

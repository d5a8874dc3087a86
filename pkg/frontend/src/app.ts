/** DOM glue: wires the session state machine to the page. */

import { ApiClient } from "./api.js";
import { doneHtml, loginHtml, retryBannerHtml, taskHtml } from "./render.js";
import { AnnotateSession } from "./session.js";

const TAB_MARKER = "wildlabel-active-annotator";

function boot(root: HTMLElement): void {
  const api = new ApiClient("");

  function showLogin(warning: string | null = null): void {
    root.innerHTML = loginHtml(warning);
    const input = root.querySelector<HTMLInputElement>("#annotator")!;
    const button = root.querySelector<HTMLButtonElement>("#start")!;
    const begin = () => {
      const annotator = input.value.trim();
      if (!annotator) {
        return;
      }
      // concurrent tabs with one id are discouraged: warn, do not block
      const active = window.localStorage.getItem(TAB_MARKER);
      if (active === annotator) {
        window.console.warn(
          "another tab may be annotating under this id; responses are "
          + "deduplicated per (image, annotator)");
      }
      window.localStorage.setItem(TAB_MARKER, annotator);
      runSession(annotator);
    };
    button.addEventListener("click", begin);
    input.addEventListener("keydown", (event) => {
      if (event.key === "Enter") {
        begin();
      }
    });
  }

  function runSession(annotator: string): void {
    let banner = "";
    const session = new AnnotateSession(api, annotator, {
      onTask(task) {
        root.innerHTML = banner + taskHtml(task);
        root.querySelectorAll<HTMLButtonElement>("button.category")
          .forEach((button) => {
            button.addEventListener("click", () => {
              void session.choose(Number(button.dataset.code));
            });
          });
        banner = "";
      },
      onRetry(attempt) {
        banner = retryBannerHtml(attempt);
        const existing = root.querySelector(".banner");
        if (existing) {
          existing.outerHTML = banner;
        } else {
          root.insertAdjacentHTML("afterbegin", banner);
        }
      },
      onDone(totals) {
        root.innerHTML = doneHtml(totals);
      },
      onError(error) {
        root.insertAdjacentHTML(
          "afterbegin",
          `<div class="banner">stopped: ${String(error)}</div>`);
      },
    });

    window.addEventListener("keydown", (event) => {
      if (event.target instanceof HTMLInputElement) {
        return;
      }
      void session.handleKey(event.key);
    });
    void session.start();
  }

  showLogin();
}

if (typeof document !== "undefined") {
  const root = document.getElementById("app");
  if (root) {
    boot(root);
  }
}

export { boot };

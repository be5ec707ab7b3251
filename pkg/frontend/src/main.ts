/**
 * Browser entry point. Resolves a worker id, builds the session against
 * the same-origin judgment service, and mounts the UI. Queued judgments
 * are retried in the background every few seconds.
 */
import { ApiClient } from "./api.js";
import { SessionController } from "./session.js";
import { mount } from "./view.js";

const WORKER_KEY = "annotation-ui.worker-id";
const RETRY_INTERVAL_MS = 15_000;

function resolveWorkerId(): string {
  const stored = window.localStorage.getItem(WORKER_KEY);
  if (stored) {
    return stored;
  }
  let entered: string | null = null;
  while (!entered) {
    entered = window.prompt("Enter your worker id");
  }
  window.localStorage.setItem(WORKER_KEY, entered);
  return entered;
}

function start(): void {
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app element");
  }
  const api = new ApiClient((input, init) => window.fetch(input, init));
  const controller = new SessionController(api, resolveWorkerId());
  mount(root, controller);
  window.setInterval(() => {
    void controller.retry.flush();
  }, RETRY_INTERVAL_MS);
}

start();

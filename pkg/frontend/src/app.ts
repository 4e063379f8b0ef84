// DOM wiring: one form to start a session, one chat column, one composer.
// All state lives in the SessionController; this layer only renders it and
// forwards events.

import { EXERCISES, isExercise } from "./contract.js";
import { SessionController, SessionView } from "./session.js";
import {
  FetchLike,
  ServerEndpoint,
  SocketCtor,
  createSession,
  openStream,
} from "./transport.js";

const DEFAULT_SERVER = "http://127.0.0.1:8000";
const CUE_MS = 400;

export function renderShell(root: HTMLElement): void {
  root.innerHTML = `
    <header>
      <h1>coachflow</h1>
      <form id="start-form">
        <input id="coachee-name" placeholder="your name" autocomplete="off">
        <select id="exercise-select">
          ${EXERCISES.map((e) => `<option value="${e}">${e.replace(/_/g, " ")}</option>`).join("")}
        </select>
        <input id="server-url" value="${DEFAULT_SERVER}" size="28">
        <label><input type="checkbox" id="debug-toggle"> debug</label>
        <button id="start-button" type="submit">start session</button>
      </form>
      <div id="start-error" class="inline-error" hidden></div>
      <div id="retry-banner" class="banner error" hidden>
        <span id="retry-message"></span>
        <button id="retry-button" type="button">retry</button>
      </div>
    </header>
    <main>
      <section id="chat-column">
        <div id="termination-banner" class="banner" hidden></div>
        <div id="error-banner" class="banner error" hidden></div>
        <div id="chat-log"></div>
        <div id="composer">
          <input id="composer-input" placeholder="waiting for the coach..." disabled>
          <button id="send-button" type="button">send</button>
        </div>
      </section>
      <aside id="debug-panel" hidden>
        <h2>decision trace</h2>
        <ul id="trace-rows"></ul>
      </aside>
    </main>`;
}

interface Elements {
  name: HTMLInputElement;
  exercise: HTMLSelectElement;
  serverUrl: HTMLInputElement;
  debugToggle: HTMLInputElement;
  startForm: HTMLFormElement;
  startButton: HTMLButtonElement;
  startError: HTMLElement;
  retryBanner: HTMLElement;
  retryMessage: HTMLElement;
  retryButton: HTMLButtonElement;
  chatLog: HTMLElement;
  terminationBanner: HTMLElement;
  errorBanner: HTMLElement;
  composerInput: HTMLInputElement;
  sendButton: HTMLButtonElement;
  debugPanel: HTMLElement;
  traceRows: HTMLElement;
}

function grab(doc: Document): Elements {
  const byId = <T extends HTMLElement>(id: string): T => {
    const el = doc.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el as T;
  };
  return {
    name: byId("coachee-name"),
    exercise: byId("exercise-select"),
    serverUrl: byId("server-url"),
    debugToggle: byId("debug-toggle"),
    startForm: byId("start-form"),
    startButton: byId("start-button"),
    startError: byId("start-error"),
    retryBanner: byId("retry-banner"),
    retryMessage: byId("retry-message"),
    retryButton: byId("retry-button"),
    chatLog: byId("chat-log"),
    terminationBanner: byId("termination-banner"),
    errorBanner: byId("error-banner"),
    composerInput: byId("composer-input"),
    sendButton: byId("send-button"),
    debugPanel: byId("debug-panel"),
    traceRows: byId("trace-rows"),
  };
}

export function renderView(view: SessionView, els: Elements, debug: boolean): void {
  els.chatLog.textContent = "";
  for (const message of view.messages) {
    const row = els.chatLog.ownerDocument.createElement("div");
    row.className = `msg ${message.speaker}`;
    if (message.turnIndex !== null) {
      row.dataset.turn = String(message.turnIndex);
    }
    row.textContent = message.text;
    els.chatLog.appendChild(row);
  }

  const awaiting = view.input === "awaiting";
  els.composerInput.disabled = !awaiting;
  els.composerInput.placeholder = awaiting ? "your turn" : "waiting for the coach...";

  els.terminationBanner.hidden = view.banner === null;
  if (view.banner !== null) {
    els.terminationBanner.dataset.reason = view.banner;
    els.terminationBanner.textContent = `session ended: ${view.banner}`;
  }
  els.errorBanner.hidden = view.error === null;
  if (view.error !== null) {
    els.errorBanner.textContent = view.error;
  }

  els.debugPanel.hidden = !debug;
  if (debug) {
    els.traceRows.textContent = "";
    for (const trace of view.traces) {
      const li = els.traceRows.ownerDocument.createElement("li");
      li.dataset.turn = String(trace.turnIndex);
      const qs = trace.qValues.map((q) => q.toFixed(3)).join(", ");
      li.textContent = `turn ${trace.turnIndex}: ${trace.action} [${qs}]`;
      els.traceRows.appendChild(li);
    }
  }
}

export interface AppDeps {
  fetchImpl?: FetchLike;
  socketCtor?: SocketCtor;
  cueMs?: number;
}

export interface AppHandle {
  start(): Promise<void>;
  send(): void;
  getView(): SessionView | null;
  elements: Elements;
}

export function initApp(doc: Document, deps: AppDeps = {}): AppHandle {
  const els = grab(doc);
  let controller: SessionController | null = null;
  let debug = false;
  let receivedAnything = false;

  const render = () => {
    if (controller) renderView(controller.view, els, debug);
  };

  const showRetry = (message: string) => {
    els.retryMessage.textContent = message;
    els.retryBanner.hidden = false;
    controller = null;
    els.chatLog.textContent = "";
    els.composerInput.disabled = true;
  };

  async function start(): Promise<void> {
    const name = els.name.value.trim();
    const exercise = els.exercise.value;
    els.startError.hidden = true;
    if (!name) {
      els.startError.textContent = "enter your name first";
      els.startError.hidden = false;
      return;
    }
    if (!isExercise(exercise)) {
      els.startError.textContent = `unknown exercise: ${exercise}`;
      els.startError.hidden = false;
      return;
    }
    els.retryBanner.hidden = true;
    els.terminationBanner.hidden = true;
    els.errorBanner.hidden = true;
    debug = els.debugToggle.checked;
    receivedAnything = false;

    const endpoint: ServerEndpoint = { baseUrl: els.serverUrl.value.trim() || DEFAULT_SERVER };
    els.startButton.disabled = true;
    try {
      const sessionId = await createSession(
        endpoint,
        { coacheeId: name, exercise, debug },
        deps.fetchImpl,
      );
      const transport = openStream(
        endpoint,
        sessionId,
        {
          onFrame: (raw) => {
            receivedAnything = true;
            controller?.handleFrame(raw);
          },
          onClose: () => {
            if (!receivedAnything) {
              showRetry(`could not connect to ${endpoint.baseUrl}`);
            } else {
              controller?.handleSocketClosed();
            }
          },
          onError: () => {
            if (!receivedAnything) {
              showRetry(`could not connect to ${endpoint.baseUrl}`);
            }
          },
        },
        deps.socketCtor,
      );
      controller = new SessionController(sessionId, transport, render);
      render();
    } catch (err) {
      showRetry(err instanceof Error ? err.message : String(err));
    } finally {
      els.startButton.disabled = false;
    }
  }

  function send(): void {
    if (!controller) return;
    const result = controller.sendUtterance(els.composerInput.value);
    if (result === "sent") {
      els.composerInput.value = "";
    } else if (result === "locked") {
      // ignored on purpose; flash the composer so the click is acknowledged
      els.sendButton.classList.add("cue-locked");
      setTimeout(() => els.sendButton.classList.remove("cue-locked"), deps.cueMs ?? CUE_MS);
    }
  }

  els.startForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    void start();
  });
  els.retryButton.addEventListener("click", () => void start());
  els.sendButton.addEventListener("click", () => send());
  els.composerInput.addEventListener("keydown", (ev) => {
    if ((ev as KeyboardEvent).key === "Enter") send();
  });

  return { start, send, getView: () => controller?.view ?? null, elements: els };
}

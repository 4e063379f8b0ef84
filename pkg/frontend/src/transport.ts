// HTTP + WebSocket plumbing. Both take injectable implementations so tests
// can run the exact same code against a fake socket or a live server.

import { CoacheeUtteranceFrame, Exercise } from "./contract.js";
import { Transport } from "./session.js";

export interface ServerEndpoint {
  baseUrl: string;
  token?: string;
}

export interface CreateSessionRequest {
  coacheeId: string;
  exercise: Exercise;
  debug?: boolean;
  mode?: "adaptive" | "generic";
  backend?: "stub" | "http";
}

export class HttpError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

function trimBase(baseUrl: string): string {
  return baseUrl.replace(/\/+$/, "");
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (body && typeof body.detail === "string") {
      return body.detail;
    }
  } catch {
    // fall through to the generic message
  }
  return `request failed with status ${response.status}`;
}

export async function createSession(
  endpoint: ServerEndpoint,
  request: CreateSessionRequest,
  fetchImpl: FetchLike = fetch,
): Promise<string> {
  const headers: Record<string, string> = { "content-type": "application/json" };
  if (endpoint.token) {
    headers["authorization"] = `Bearer ${endpoint.token}`;
  }
  const response = await fetchImpl(`${trimBase(endpoint.baseUrl)}/sessions`, {
    method: "POST",
    headers,
    body: JSON.stringify({
      coachee_id: request.coacheeId,
      exercise: request.exercise,
      mode: request.mode ?? "adaptive",
      backend: request.backend ?? "stub",
      debug: request.debug ?? false,
    }),
  });
  if (!response.ok) {
    throw new HttpError(response.status, await errorDetail(response));
  }
  const body = await response.json();
  if (!body || typeof body.session_id !== "string") {
    throw new HttpError(response.status, "create response carried no session_id");
  }
  return body.session_id;
}

export function streamUrl(endpoint: ServerEndpoint, sessionId: string): string {
  const ws = trimBase(endpoint.baseUrl).replace(/^http/, "ws");
  const query = endpoint.token ? `?token=${encodeURIComponent(endpoint.token)}` : "";
  return `${ws}/sessions/${sessionId}/stream${query}`;
}

export async function fetchSessionLog(
  endpoint: ServerEndpoint,
  sessionId: string,
  fetchImpl: FetchLike = fetch,
): Promise<{ summary: Record<string, unknown>; turns: Record<string, unknown>[] }> {
  const headers: Record<string, string> = {};
  if (endpoint.token) {
    headers["authorization"] = `Bearer ${endpoint.token}`;
  }
  const response = await fetchImpl(
    `${trimBase(endpoint.baseUrl)}/sessions/${sessionId}/log`,
    { headers },
  );
  if (!response.ok) {
    throw new HttpError(response.status, await errorDetail(response));
  }
  return (await response.json()) as {
    summary: Record<string, unknown>;
    turns: Record<string, unknown>[];
  };
}

// Minimal socket surface shared by the browser WebSocket and the ws package.
export interface SocketLike {
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketCtor = new (url: string) => SocketLike;

export interface StreamHandlers {
  onFrame(raw: unknown): void;
  onOpen?(): void;
  onClose?(): void;
  onError?(): void;
}

export function openStream(
  endpoint: ServerEndpoint,
  sessionId: string,
  handlers: StreamHandlers,
  socketCtor?: SocketCtor,
): Transport {
  const ctor =
    socketCtor ?? ((globalThis as { WebSocket?: SocketCtor }).WebSocket as SocketCtor);
  if (!ctor) {
    throw new Error("no WebSocket implementation available");
  }
  const socket = new ctor(streamUrl(endpoint, sessionId));
  socket.onopen = () => handlers.onOpen?.();
  socket.onmessage = (ev) => handlers.onFrame(ev.data);
  socket.onclose = () => handlers.onClose?.();
  socket.onerror = () => handlers.onError?.();
  return {
    send(frame: CoacheeUtteranceFrame): void {
      socket.send(JSON.stringify(frame));
    },
    close(): void {
      socket.close();
    },
  };
}

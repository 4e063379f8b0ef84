// Wire contract with the coachflow session server, duplicated here so the
// client has no build-time dependency on the Python package. Bump the
// version whenever the frame shapes change on either side.

export const CONTRACT_VERSION = 1;

export const EXERCISES = [
  "savouring",
  "gratitude",
  "accomplishment",
  "one_door_closes_one_door_opens",
] as const;

export type Exercise = (typeof EXERCISES)[number];

// server -> client

export interface CoachUtteranceFrame {
  type: "coach_utterance";
  kind: string;
  text: string;
  turn_index: number | null;
  awaiting_input: boolean;
}

export interface DecisionTraceFrame {
  type: "decision_trace";
  turn_index: number;
  action: string;
  q_values: number[];
}

export interface SessionEndFrame {
  type: "session_end";
  reason: string;
}

export interface ErrorFrame {
  type: "error";
  error: string;
}

export type ServerFrame =
  | CoachUtteranceFrame
  | DecisionTraceFrame
  | SessionEndFrame
  | ErrorFrame;

// client -> server. Prosody fields are optional; the server synthesizes
// text-only defaults when they are absent.

export interface CoacheeUtteranceFrame {
  type: "coachee_utterance";
  text: string;
  speech_duration_s?: number;
  silence_duration_s?: number;
  valence_samples?: number[];
}

export class ContractError extends Error {}

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

export function parseServerFrame(raw: unknown): ServerFrame {
  const data = typeof raw === "string" ? JSON.parse(raw) : raw;
  if (!isRecord(data)) {
    throw new ContractError("frame must be a JSON object");
  }
  switch (data.type) {
    case "coach_utterance": {
      if (typeof data.text !== "string" || typeof data.kind !== "string") {
        throw new ContractError("coach_utterance needs string text and kind");
      }
      const turn = data.turn_index;
      if (turn !== null && typeof turn !== "number") {
        throw new ContractError("turn_index must be a number or null");
      }
      return {
        type: "coach_utterance",
        kind: data.kind,
        text: data.text,
        turn_index: turn as number | null,
        awaiting_input: data.awaiting_input === true,
      };
    }
    case "decision_trace": {
      if (typeof data.turn_index !== "number" || typeof data.action !== "string") {
        throw new ContractError("decision_trace needs turn_index and action");
      }
      const q = data.q_values;
      if (!Array.isArray(q) || q.some((v) => typeof v !== "number")) {
        throw new ContractError("q_values must be an array of numbers");
      }
      return {
        type: "decision_trace",
        turn_index: data.turn_index,
        action: data.action,
        q_values: q as number[],
      };
    }
    case "session_end": {
      if (typeof data.reason !== "string") {
        throw new ContractError("session_end needs a string reason");
      }
      return { type: "session_end", reason: data.reason };
    }
    case "error": {
      if (typeof data.error !== "string") {
        throw new ContractError("error frame needs a string error");
      }
      return { type: "error", error: data.error };
    }
    default:
      throw new ContractError(`unknown frame type ${JSON.stringify(data.type)}`);
  }
}

export function isExercise(value: string): value is Exercise {
  return (EXERCISES as readonly string[]).includes(value);
}

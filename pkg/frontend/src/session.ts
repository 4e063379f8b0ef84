// UI-side session state machine. Input stays locked except inside the
// window between an awaiting_input frame and the reply; messages are kept
// in server-stream order so the rendered transcript can be compared
// one-to-one with the persisted session log.

import {
  CoacheeUtteranceFrame,
  ServerFrame,
  parseServerFrame,
} from "./contract.js";

export type Speaker = "coach" | "coachee";

export interface Message {
  speaker: Speaker;
  text: string;
  turnIndex: number | null;
}

export interface TraceRow {
  turnIndex: number;
  action: string;
  qValues: number[];
}

export type InputState = "locked" | "awaiting";

export interface SessionView {
  sessionId: string;
  messages: Message[];
  traces: TraceRow[];
  input: InputState;
  banner: string | null;
  error: string | null;
}

export type SendResult = "sent" | "empty" | "locked";

export interface Transport {
  send(frame: CoacheeUtteranceFrame): void;
  close(): void;
}

export class SessionController {
  readonly view: SessionView;
  private ended = false;

  constructor(
    sessionId: string,
    private transport: Transport,
    private onChange: (view: SessionView) => void = () => {},
  ) {
    this.view = {
      sessionId,
      messages: [],
      traces: [],
      input: "locked",
      banner: null,
      error: null,
    };
  }

  handleFrame(raw: unknown): void {
    let frame: ServerFrame;
    try {
      frame = parseServerFrame(raw);
    } catch (err) {
      this.view.error = String(err instanceof Error ? err.message : err);
      this.onChange(this.view);
      return;
    }
    switch (frame.type) {
      case "coach_utterance":
        this.view.messages.push({
          speaker: "coach",
          text: frame.text,
          turnIndex: frame.turn_index,
        });
        if (!this.ended) {
          this.view.input = frame.awaiting_input ? "awaiting" : "locked";
        }
        break;
      case "decision_trace":
        this.view.traces.push({
          turnIndex: frame.turn_index,
          action: frame.action,
          qValues: frame.q_values,
        });
        break;
      case "session_end":
        this.ended = true;
        this.view.banner = frame.reason;
        this.view.input = "locked";
        break;
      case "error":
        this.view.error = frame.error;
        break;
    }
    this.onChange(this.view);
  }

  // Returns why nothing was sent so the caller can show a cue; a frame
  // leaves the client only while the server is actually awaiting one.
  sendUtterance(text: string): SendResult {
    if (this.ended || this.view.input !== "awaiting") {
      return "locked";
    }
    const trimmed = text.trim();
    if (!trimmed) {
      return "empty";
    }
    this.transport.send({ type: "coachee_utterance", text: trimmed });
    this.view.messages.push({ speaker: "coachee", text: trimmed, turnIndex: null });
    this.view.input = "locked";
    this.onChange(this.view);
    return "sent";
  }

  handleSocketClosed(): void {
    if (!this.ended) {
      this.ended = true;
      this.view.banner = "connection lost";
      this.view.input = "locked";
      this.onChange(this.view);
    }
  }

  isEnded(): boolean {
    return this.ended;
  }

  close(): void {
    this.transport.close();
  }
}

export function transcriptLines(view: SessionView): string[] {
  return view.messages.map((m) => `${m.speaker}: ${m.text}`);
}

"""Live-session service: HTTP for lifecycle, WebSocket for the dialogue itself.

One orchestrator thread per session, bridged to the socket through a pair
of queues. The registry is the single source of truth for session state
and only ever moves a session forward (created -> running -> done).
"""

from __future__ import annotations

import asyncio
import json
import os
import queue
import threading
import time
import uuid
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from fastapi import Body, FastAPI, Header, HTTPException, WebSocket
from starlette.websockets import WebSocketDisconnect

from .core import ExerciseKind, Transition
from .dialogue import (
    CoacheeTurnInput,
    CoachFrame,
    SessionConfig,
    SessionLog,
    run_session,
)
from .llmclient import RemoteBackend, StubBackend
from .policy import (
    AdaptivePolicy,
    FrozenPolicy,
    OnlineConfig,
    PolicyCheckpoint,
    fork_for_coachee,
)
from .store import append_session_log, load_checkpoint, load_transitions

# Degraded-fidelity defaults for text-only clients: duration from a flat
# words-per-second model, valence from a neutral constant stream.
WORDS_PER_SECOND = 2.5
NEUTRAL_VALENCE = (0.0, 0.0, 0.0, 0.0, 0.0)
DEFAULT_SILENCE_S = 1.0

EXERCISE_NAMES = ("savouring", "gratitude", "accomplishment",
                  "one_door_closes_one_door_opens")
MODES = ("adaptive", "generic")
BACKENDS = ("stub", "remote")

_CLOSE = object()  # outbound sentinel: no more frames for this session

_STATE_RANK = {"created": 0, "running": 1, "completed": 2, "terminated": 2}


class ProtocolError(ValueError):
    """Client frame that cannot be turned into a turn input."""


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    checkpoint_path: Optional[Path] = None
    corpus_path: Optional[Path] = None       # generic replay corpus for adaptive sessions
    log_path: Optional[Path] = None          # JSONL sink; unset = in-memory only
    llm_base_url: str = ""
    llm_model: str = ""
    llm_auth_env: str = "COACHFLOW_LLM_TOKEN"
    auth_token_env: str = "COACHFLOW_AUTH_TOKEN"
    stub_seed: int = 0
    online: OnlineConfig = field(default_factory=OnlineConfig)


@dataclass
class SessionHandle:
    session_id: str
    coachee_id: str
    state: str = "created"
    created_at: float = field(default_factory=time.time)
    termination_reason: Optional[str] = None

    def advance(self, new_state: str, reason: Optional[str] = None) -> None:
        # Forward-only; terminal states never flip into one another.
        if _STATE_RANK[new_state] < _STATE_RANK[self.state]:
            raise RuntimeError(f"cannot move session from {self.state} to {new_state}")
        if _STATE_RANK[self.state] == 2 and new_state != self.state:
            raise RuntimeError(f"session already {self.state}")
        self.state = new_state
        if reason is not None:
            self.termination_reason = reason

    def as_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "coachee_id": self.coachee_id,
            "state": self.state,
            "created_at": self.created_at,
            "termination_reason": self.termination_reason,
        }


class ServerChannel:
    """Queue bridge between the orchestrator thread and the socket task.

    poll() blocks briefly instead of spinning; the orchestrator's own
    listen timeout still governs re-prompts and silence synthesis.
    """

    def __init__(self, debug: bool = False, poll_timeout_s: float = 0.02):
        self.inbound: "queue.Queue[CoacheeTurnInput]" = queue.Queue()
        self.outbound: "queue.Queue" = queue.Queue()
        self.debug = debug
        self.poll_timeout_s = poll_timeout_s
        self._disconnected = threading.Event()
        self.sent_frames: list[dict] = []  # server-side transcript record

    def speak(self, frame: CoachFrame) -> None:
        message = {
            "type": "coach_utterance",
            "kind": frame.kind,
            "text": frame.text,
            "turn_index": frame.turn_index,
            "awaiting_input": frame.awaiting_input,
        }
        self.sent_frames.append(message)
        self.outbound.put(message)
        if self.debug and frame.action is not None:
            self.outbound.put({
                "type": "decision_trace",
                "turn_index": frame.turn_index,
                "action": frame.action.name,
                "q_values": list(frame.q_values or ()),
            })

    def poll(self) -> Optional[CoacheeTurnInput]:
        try:
            return self.inbound.get(timeout=self.poll_timeout_s)
        except queue.Empty:
            return None

    def end(self, reason) -> None:
        value = reason.value if hasattr(reason, "value") else str(reason)
        self.outbound.put({"type": "session_end", "reason": value})
        self.outbound.put(_CLOSE)

    def disconnected(self) -> bool:
        return self._disconnected.is_set()

    def mark_disconnected(self) -> None:
        self._disconnected.set()


def parse_client_frame(data: object) -> CoacheeTurnInput:
    """Turn one client JSON frame into a turn input, defaulting missing features."""
    if not isinstance(data, dict):
        raise ProtocolError("frame must be a JSON object")
    if data.get("type") != "coachee_utterance":
        raise ProtocolError(f"unsupported frame type {data.get('type')!r}")
    text = data.get("text")
    if not isinstance(text, str):
        raise ProtocolError("coachee_utterance requires a string 'text'")

    speech = data.get("speech_duration_s")
    if speech is None:
        speech = len(text.split()) / WORDS_PER_SECOND
    valence = data.get("valence_samples")
    if valence is None:
        valence = NEUTRAL_VALENCE
    silence = data.get("silence_duration_s", DEFAULT_SILENCE_S)
    rupture = data.get("rupture_flag")

    try:
        return CoacheeTurnInput(
            transcript=text,
            speech_duration_s=float(speech),
            silence_duration_s=float(silence),
            valence_samples=tuple(float(v) for v in valence),
            rupture_flag=None if rupture is None else bool(rupture),
        )
    except (TypeError, ValueError) as err:
        raise ProtocolError(str(err)) from err


@dataclass
class _Session:
    handle: SessionHandle
    config: SessionConfig
    channel: ServerChannel
    policy: object
    backend: object
    thread: Optional[threading.Thread] = None
    log: Optional[SessionLog] = None
    error: Optional[str] = None


def create_app(config: Optional[ServerConfig] = None, *,
               checkpoint: Optional[PolicyCheckpoint] = None,
               generic_corpus: Sequence[Transition] = ()) -> FastAPI:
    """Build the service. `checkpoint`/`generic_corpus` bypass file loading
    so tests and embedded use don't need artifacts on disk."""
    cfg = config or ServerConfig()
    app = FastAPI(title="coachflow", docs_url=None, redoc_url=None)

    registry: dict[str, _Session] = {}
    registry_lock = threading.Lock()
    cache: dict = {"checkpoint": checkpoint, "corpus": tuple(generic_corpus)}

    def auth_token() -> str:
        return os.environ.get(cfg.auth_token_env, "")

    def require_auth(authorization: str) -> None:
        token = auth_token()
        if token and authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    def get_checkpoint() -> PolicyCheckpoint:
        if cache["checkpoint"] is None:
            path = cfg.checkpoint_path
            if path is None or not Path(path).exists():
                raise HTTPException(
                    status_code=404,
                    detail=f"no policy checkpoint available at {path}")
            loaded = load_checkpoint(path)
            if not isinstance(loaded, PolicyCheckpoint):
                raise HTTPException(
                    status_code=404,
                    detail=f"{path} does not hold a policy checkpoint")
            cache["checkpoint"] = loaded
        return cache["checkpoint"]

    def get_corpus() -> tuple:
        if not cache["corpus"] and cfg.corpus_path and Path(cfg.corpus_path).exists():
            cache["corpus"] = tuple(load_transitions(cfg.corpus_path))
        return cache["corpus"]

    def build_backend(name: str):
        if name == "stub":
            return StubBackend(seed=cfg.stub_seed)
        if not cfg.llm_base_url or not cfg.llm_model:
            raise HTTPException(status_code=400,
                                detail="remote backend is not configured on this server")
        return RemoteBackend(cfg.llm_base_url, cfg.llm_model, auth_env_var=cfg.llm_auth_env)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "sessions": len(registry)}

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict = Body(...),
                       authorization: str = Header(default="")) -> dict:
        require_auth(authorization)
        coachee_id = payload.get("coachee_id")
        if not isinstance(coachee_id, str) or not coachee_id.strip():
            raise HTTPException(status_code=400, detail="coachee_id must be a non-empty string")

        raw_exercise = payload.get("exercise", "")
        try:
            exercise = ExerciseKind.from_name(str(raw_exercise))
        except ValueError:
            raise HTTPException(
                status_code=400,
                detail=(f"unknown exercise {raw_exercise!r}; "
                        f"valid exercises: {', '.join(EXERCISE_NAMES)}"))

        mode = payload.get("mode", "adaptive")
        if mode not in MODES:
            raise HTTPException(status_code=400,
                                detail=f"mode must be one of: {', '.join(MODES)}")
        backend_name = payload.get("backend", "stub")
        if backend_name not in BACKENDS:
            raise HTTPException(status_code=400,
                                detail=f"backend must be one of: {', '.join(BACKENDS)}")

        base = get_checkpoint()
        if mode == "adaptive":
            fork = fork_for_coachee(base, coachee_id)
            policy = AdaptivePolicy(fork, cfg.online, generic_corpus=get_corpus(),
                                    seed=zlib.crc32(coachee_id.encode("utf-8")))
        else:
            policy = FrozenPolicy(base, epsilon=0.0)
        backend = build_backend(backend_name)

        session_id = uuid.uuid4().hex
        try:
            session_config = SessionConfig(
                exercise=exercise,
                coachee_id=coachee_id,
                session_index=int(payload.get("session_index", 1)),
                turn_limit=int(payload.get("turn_limit", 8)),
                listen_timeout_s=float(payload.get("listen_timeout_s", 60.0)),
                session_id=session_id,
            )
        except (TypeError, ValueError) as err:
            raise HTTPException(status_code=400, detail=str(err))

        session = _Session(
            handle=SessionHandle(session_id=session_id, coachee_id=coachee_id),
            config=session_config,
            channel=ServerChannel(debug=bool(payload.get("debug", False))),
            policy=policy,
            backend=backend,
        )
        with registry_lock:
            registry[session_id] = session
        return session.handle.as_dict()

    @app.get("/sessions/{session_id}/log")
    def get_session_log(session_id: str,
                        authorization: str = Header(default="")) -> dict:
        require_auth(authorization)
        session = registry.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        if session.handle.state in ("created", "running") or session.log is None:
            raise HTTPException(
                status_code=409,
                detail=f"session {session_id!r} is {session.handle.state}; log is "
                       "available once it has finished")
        log = session.log
        return {
            "summary": log.to_summary_dict(),
            "turns": [{"record": "turn", "session_id": log.session_id, **t.to_dict()}
                      for t in log.turns],
        }

    def run_orchestrator(session: _Session) -> None:
        try:
            session.log = run_session(session.config, session.channel,
                                      session.policy, session.backend)
        except Exception as err:  # orchestrator normally absorbs failures itself
            session.error = f"{type(err).__name__}: {err}"
            session.channel.end("error")
        finally:
            reason = (session.log.termination.value
                      if session.log and session.log.termination else "error")
            new_state = "completed" if reason == "completed" else "terminated"
            with registry_lock:
                session.handle.advance(new_state, reason=reason)
            if session.log is not None and cfg.log_path is not None:
                append_session_log(cfg.log_path, session.log)

    @app.websocket("/sessions/{session_id}/stream")
    async def stream_session(ws: WebSocket, session_id: str) -> None:
        await ws.accept()
        token = auth_token()
        if token and ws.query_params.get("token") != token:
            await ws.send_json({"type": "error", "error": "missing or invalid token"})
            await ws.close(code=4401)
            return

        session = registry.get(session_id)
        if session is None:
            await ws.send_json({"type": "error", "error": f"unknown session {session_id!r}"})
            await ws.close(code=4404)
            return
        with registry_lock:
            if session.handle.state != "created":
                await ws.send_json({
                    "type": "error",
                    "error": f"session is {session.handle.state}; a stream may be "
                             "opened exactly once on a fresh session"})
                await ws.close(code=4409)
                return
            session.handle.advance("running")
            session.thread = threading.Thread(target=run_orchestrator,
                                              args=(session,), daemon=True)
            session.thread.start()

        channel = session.channel

        async def pump_outbound() -> None:
            while True:
                message = await asyncio.to_thread(channel.outbound.get)
                if message is _CLOSE:
                    return
                try:
                    await ws.send_json(message)
                except Exception:
                    # Half-closed socket: tell the orchestrator, keep
                    # draining so its end frame does not wedge the queue.
                    channel.mark_disconnected()

        async def safe_send(message: dict) -> bool:
            try:
                await ws.send_json(message)
                return True
            except Exception:
                channel.mark_disconnected()
                return False

        sender = asyncio.create_task(pump_outbound())
        receiver = asyncio.create_task(ws.receive_text())
        try:
            while True:
                done, _ = await asyncio.wait({sender, receiver},
                                             return_when=asyncio.FIRST_COMPLETED)
                if receiver in done:
                    try:
                        raw = receiver.result()
                    except (WebSocketDisconnect, RuntimeError):
                        channel.mark_disconnected()
                        receiver = None
                        break
                    alive = True
                    try:
                        frame = parse_client_frame(json.loads(raw))
                    except json.JSONDecodeError:
                        alive = await safe_send({"type": "error",
                                                 "error": "frame is not valid JSON"})
                    except ProtocolError as err:
                        alive = await safe_send({"type": "error", "error": str(err)})
                    else:
                        channel.inbound.put(frame)
                    if not alive:
                        receiver = None
                        break
                    receiver = asyncio.create_task(ws.receive_text())
                if sender in done:
                    break
        finally:
            # This block must stay synchronous: it also runs when the
            # server cancels the handler, where any await raises again.
            if receiver is not None:
                receiver.cancel()
            if not sender.done():
                channel.mark_disconnected()
                sender.cancel()
        if sender.done():
            # Session ended normally: wait for the registry to finalise so
            # the log is readable the moment the socket closes.
            await asyncio.to_thread(session.thread.join, 10.0)
            try:
                await ws.close()
            except RuntimeError:
                pass  # already closed by the client

    return app


def serve(config: ServerConfig, *, checkpoint: Optional[PolicyCheckpoint] = None) -> None:
    """Blocking entry point used by the command line."""
    import uvicorn

    app = create_app(config, checkpoint=checkpoint)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")

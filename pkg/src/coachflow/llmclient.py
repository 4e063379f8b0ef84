"""Chat-completion and moderation clients, plus a hermetic stub backend.

The coach asks the language model to produce its next utterance by
appending a fixed per-action prompt to the conversation history. Every
piece of text, in both directions, passes a moderation check; a failed
or unreachable moderation service is treated as a flag (fail closed).
"""

from __future__ import annotations

import os
import re
import zlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import httpx

from .core import DialogueAction

ROLES = ("system", "human", "ai")

# Per-action completion prompts, used verbatim.
ACTION_PROMPTS = {
    DialogueAction.SUMMARISE: "Can you please summarise what the Human has just shared?",
    DialogueAction.FOLLOW_UP_QUESTION: (
        "Can you please ask me a follow-up question about the exercise episode "
        "I have just shared?"
    ),
    DialogueAction.NEW_EPISODE: "Can you please ask me about a new episode to share?",
}

# Spoken when moderation flags the coachee's answer; the session stops here.
REFUSAL_UTTERANCE = (
    "I found your answer very inappropriate. I would stop here the coaching "
    "practice and call the researcher"
)


class LlmTransportError(RuntimeError):
    """Typed transport/service failure, so the orchestrator can retry or fail closed."""


def build_prompt(action: DialogueAction) -> str:
    return ACTION_PROMPTS[action]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.text:
            raise ValueError("message text must be non-empty")


class ChatHistory:
    """Session-scoped message list: one system head, then human/ai alternation."""

    def __init__(self, system_text: str):
        if not system_text:
            raise ValueError("system context must be non-empty")
        self._messages: list[ChatMessage] = [ChatMessage("system", system_text)]

    @property
    def messages(self) -> tuple[ChatMessage, ...]:
        return tuple(self._messages)

    @property
    def system_text(self) -> str:
        return self._messages[0].text

    def __len__(self) -> int:
        return len(self._messages)

    def append(self, role: str, text: str) -> None:
        expected = "human" if len(self._messages) % 2 == 1 else "ai"
        if role != expected:
            raise ValueError(
                f"history alternates human/ai after the system head; "
                f"expected {expected!r} next, got {role!r}"
            )
        self._messages.append(ChatMessage(role, text))


@dataclass(frozen=True)
class ModerationVerdict:
    flagged: bool
    categories: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.flagged != bool(self.categories):
            raise ValueError("flagged must hold exactly when categories are non-empty")


# ---------------------------------------------------------------------------
# Stub backend
# ---------------------------------------------------------------------------

# Phrase list for the stub moderation check. A phrase matches when it
# appears in the lowercased text starting at a word boundary, so "killing"
# flags via "kill" while "skill" does not.
_STUB_FLAG_PHRASES = {
    "punch": "violence",
    "hit someone": "violence",
    "kill": "violence",
    "stab": "violence",
    "weapon": "violence",
    "attack someone": "violence",
    "hurt myself": "self-harm",
    "harm myself": "self-harm",
    "suicide": "self-harm",
    "end my life": "self-harm",
}
_STUB_FLAG_PATTERNS = {
    re.compile(r"\b" + re.escape(phrase)): tag
    for phrase, tag in _STUB_FLAG_PHRASES.items()
}

_SUMMARY_OPENERS = (
    "So, what I heard is that",
    "Let me reflect that back:",
    "It sounds like",
    "If I understood you well,",
)
_FOLLOWUP_QUESTIONS = (
    "How did that moment make you feel?",
    "What part of that experience mattered most to you?",
    "Who else was involved, and how did they react?",
    "What would you like to take away from that episode?",
)
_NEW_EPISODE_ASKS = (
    "Thank you for sharing. Could you tell me about another episode?",
    "I appreciate that. Is there a different moment you would like to share?",
    "Thank you. Can you think of one more episode from this week?",
    "That was valuable. Could you share a new episode now?",
)
_GENERIC_REPLIES = (
    "Thank you for telling me. Please go on.",
    "I see. Could you say a little more?",
)


class StubBackend:
    """Deterministic offline backend.

    Replies are template picks keyed by a checksum of (seed, full message
    text), so identical histories produce identical replies with no hidden
    RNG state. The error flags inject transport failures for tests.
    """

    def __init__(self, seed: int = 0, completion_error: bool = False,
                 moderation_error: bool = False):
        self.seed = seed
        self.completion_error = completion_error
        self.moderation_error = moderation_error

    def _pick(self, options: Sequence[str], content: str) -> str:
        digest = zlib.crc32(f"{self.seed}|{content}".encode("utf-8"))
        return options[digest % len(options)]

    def chat(self, messages: Sequence[ChatMessage]) -> str:
        if self.completion_error:
            raise LlmTransportError("stub completion failure injected")
        content = "\n".join(f"{m.role}:{m.text}" for m in messages)
        last = messages[-1].text if messages else ""
        if ACTION_PROMPTS[DialogueAction.SUMMARISE] in last:
            opener = self._pick(_SUMMARY_OPENERS, content)
            gist = _last_coachee_gist(messages)
            return f"{opener} {gist}"
        if ACTION_PROMPTS[DialogueAction.FOLLOW_UP_QUESTION] in last:
            return self._pick(_FOLLOWUP_QUESTIONS, content)
        if ACTION_PROMPTS[DialogueAction.NEW_EPISODE] in last:
            return self._pick(_NEW_EPISODE_ASKS, content)
        return self._pick(_GENERIC_REPLIES, content)

    def moderation(self, text: str) -> ModerationVerdict:
        if self.moderation_error:
            raise LlmTransportError("stub moderation failure injected")
        lowered = text.lower()
        categories = frozenset(
            tag for pattern, tag in _STUB_FLAG_PATTERNS.items() if pattern.search(lowered)
        )
        return ModerationVerdict(flagged=bool(categories), categories=categories)


def _last_coachee_gist(messages: Sequence[ChatMessage]) -> str:
    """First sentence of the latest human turn, for the stub's summaries."""
    for message in reversed(messages):
        if message.role == "human":
            head = message.text.split("\n")[0].strip()
            first = head.split(".")[0].strip()
            if first:
                return f"you shared: \"{first}\"."
            break
    return "you shared an episode with me."


# ---------------------------------------------------------------------------
# Remote backend (chat-completion compatible HTTP service)
# ---------------------------------------------------------------------------

_ROLE_WIRE = {"system": "system", "human": "user", "ai": "assistant"}


class RemoteBackend:
    """HTTP client for a chat-completion service and its moderation endpoint.

    The bearer token is read from the named environment variable at call
    time, never stored in config files.
    """

    def __init__(self, base_url: str, model: str, auth_env_var: str = "COACHFLOW_LLM_TOKEN",
                 timeout_s: float = 30.0, transport: Optional[httpx.BaseTransport] = None):
        if not base_url:
            raise ValueError("base_url must be non-empty")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.auth_env_var = auth_env_var
        self.timeout_s = timeout_s
        self._transport = transport

    def _headers(self) -> dict:
        token = os.environ.get(self.auth_env_var, "")
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        try:
            with httpx.Client(timeout=self.timeout_s, transport=self._transport) as client:
                response = client.post(
                    f"{self.base_url}{path}", json=payload, headers=self._headers()
                )
        except httpx.HTTPError as err:
            raise LlmTransportError(f"request to {path} failed: {err}") from err
        if response.status_code != 200:
            raise LlmTransportError(
                f"{path} returned status {response.status_code}: {response.text[:200]}"
            )
        try:
            return response.json()
        except ValueError as err:
            raise LlmTransportError(f"{path} returned non-JSON body") from err

    def chat(self, messages: Sequence[ChatMessage]) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": _ROLE_WIRE[m.role], "content": m.text} for m in messages],
        }
        body = self._post("/chat/completions", payload)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as err:
            raise LlmTransportError(f"malformed completion response: {err}") from err

    def moderation(self, text: str) -> ModerationVerdict:
        body = self._post("/moderations", {"input": text})
        try:
            result = body["results"][0]
            flagged = bool(result["flagged"])
            categories = frozenset(
                name for name, hit in result.get("categories", {}).items() if hit
            )
        except (KeyError, IndexError, TypeError) as err:
            raise LlmTransportError(f"malformed moderation response: {err}") from err
        if flagged and not categories:
            categories = frozenset({"unspecified"})
        if not flagged:
            categories = frozenset()
        return ModerationVerdict(flagged=flagged, categories=categories)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def complete(backend, history: ChatHistory, prompt: str) -> str:
    """Ask the backend to continue the conversation.

    On success the prompt and reply are appended to the history (human
    then ai). On transport failure the history is left untouched, so a
    retry does not duplicate turns.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    candidate = list(history.messages) + [ChatMessage("human", prompt)]
    reply = backend.chat(candidate)
    if not reply:
        raise LlmTransportError("backend returned an empty completion")
    history.append("human", prompt)
    history.append("ai", reply)
    return reply


def moderate(backend, text: str) -> ModerationVerdict:
    if not text:
        raise ValueError("cannot moderate empty text")
    return backend.moderation(text)


@dataclass(frozen=True)
class AdversarialEntry:
    text: str
    expect_flagged: bool


@dataclass(frozen=True)
class AdversarialRow:
    text: str
    expect_flagged: bool
    flagged: bool
    categories: frozenset[str]
    refusal_fired: bool
    utterance: str

    @property
    def matches_expectation(self) -> bool:
        return self.flagged == self.expect_flagged


def load_adversarial_corpus(path=None) -> list[AdversarialEntry]:
    """Corpus lines are '<expected>\\t<text>' with expected in {flagged, benign}."""
    if path is None:
        raw = resources.files("coachflow.data").joinpath("adversarial.txt").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    entries = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t", 1)
        if len(parts) != 2 or parts[0] not in ("flagged", "benign"):
            raise ValueError(f"adversarial corpus line {line_no}: expected '<flagged|benign>\\t<text>'")
        entries.append(AdversarialEntry(text=parts[1].strip(), expect_flagged=parts[0] == "flagged"))
    if not entries:
        raise ValueError("adversarial corpus is empty")
    return entries


def adversarial_suite(backend, corpus: Optional[Sequence[AdversarialEntry]] = None) -> list[AdversarialRow]:
    """Replay the adversarial corpus through the moderation gate.

    Flagged inputs take the refusal path and are never sent for completion;
    clean inputs get a normal completion so the full path is exercised.
    """
    entries = list(corpus) if corpus is not None else load_adversarial_corpus()
    rows = []
    for entry in entries:
        verdict = moderate(backend, entry.text)
        if verdict.flagged:
            rows.append(
                AdversarialRow(
                    text=entry.text,
                    expect_flagged=entry.expect_flagged,
                    flagged=True,
                    categories=verdict.categories,
                    refusal_fired=True,
                    utterance=REFUSAL_UTTERANCE,
                )
            )
            continue
        history = ChatHistory("You are a well-being coach guiding a positive psychology exercise.")
        reply = complete(backend, history, f"{entry.text}\n\n{build_prompt(DialogueAction.SUMMARISE)}")
        rows.append(
            AdversarialRow(
                text=entry.text,
                expect_flagged=entry.expect_flagged,
                flagged=False,
                categories=frozenset(),
                refusal_fired=False,
                utterance=reply,
            )
        )
    return rows

"""Versioned persistence: checkpoints, session logs, transition corpora.

Checkpoints use a compact binary container (magic, version, 64-bit
integrity checksum, JSON header, float64 parameter blob) because policy
determinism tests require bit-exact round trips. Logs and corpora use
JSONL: streamable, diffable, and reconstructible after interleaved writes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .core import DialogueAction, ExerciseKind, StateVector, Transition
from .dialogue import SessionLog, Termination, TurnRecord
from .neural.network import NetworkSpec
from .policy import PolicyCheckpoint
from .reward import BaselineValence, DurationStats, RewardConfig
from .rupture import WindowClassifier

MAGIC = b"CFCK"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIQI")  # magic, version, checksum, header length


class StoreError(Exception):
    """Base class for persistence failures."""


class CorruptFileError(StoreError):
    pass


class VersionError(StoreError):
    pass


# ---------------------------------------------------------------------------
# Parameter flattening
# ---------------------------------------------------------------------------


def _flatten_params(params: dict) -> tuple[list, np.ndarray]:
    """Deterministic layout: sorted layer names, sorted tensor names.

    Parameter-free layers (pooling) still get a marker row so the rebuilt
    dict keeps an entry for every layer the forward pass will index.
    """
    layout = []
    chunks = []
    for layer in sorted(params):
        if not params[layer]:
            layout.append([layer, None, None])
            continue
        for name in sorted(params[layer]):
            arr = np.asarray(params[layer][name], dtype=np.float64)
            layout.append([layer, name, list(arr.shape)])
            chunks.append(arr.ravel())
    blob = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.float64)
    return layout, blob


def _unflatten_params(layout: Sequence, blob: np.ndarray) -> dict:
    params: dict = {}
    offset = 0
    for layer, name, shape in layout:
        if name is None:
            params.setdefault(layer, {})
            continue
        size = int(np.prod(shape)) if shape else 1
        chunk = blob[offset:offset + size]
        if chunk.size != size:
            raise CorruptFileError("parameter blob shorter than its layout")
        params.setdefault(layer, {})[name] = chunk.reshape(shape).copy()
        offset += size
    if offset != blob.size:
        raise CorruptFileError(
            f"parameter blob has {blob.size - offset} unexplained trailing values")
    return params


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _write_container(path, header: dict, blob: np.ndarray) -> None:
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = blob.tobytes()
    checksum = int.from_bytes(
        hashlib.blake2b(header_bytes + payload, digest_size=8).digest(), "little")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, checksum, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def _read_container(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise CorruptFileError(f"{path}: too short to hold a checkpoint header")
    magic, version, checksum, header_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    body = data[_HEAD.size:]
    if len(body) < header_len:
        raise CorruptFileError(f"{path}: truncated header")
    expected = int.from_bytes(
        hashlib.blake2b(body, digest_size=8).digest(), "little")
    if expected != checksum:
        raise CorruptFileError(f"{path}: checksum mismatch, file is corrupted")
    header = json.loads(body[:header_len].decode("utf-8"))
    payload = body[header_len:]
    if len(payload) % 8 != 0:
        raise CorruptFileError(f"{path}: parameter payload is not float64-aligned")
    blob = np.frombuffer(payload, dtype=np.float64)
    return header, blob


def save_checkpoint(path, checkpoint: Union[PolicyCheckpoint, WindowClassifier]) -> None:
    if isinstance(checkpoint, PolicyCheckpoint):
        layout, blob = _flatten_params(checkpoint.params)
        header = {
            "kind": "policy",
            "algorithm": checkpoint.algorithm,
            "spec": checkpoint.spec.to_dict(),
            "duration_stats": {
                "mean_s": checkpoint.duration_stats.mean_s,
                "std_s": checkpoint.duration_stats.std_s,
                "source": checkpoint.duration_stats.source,
            },
            "reward_config": {
                "scale_fv": checkpoint.reward_config.scale_fv,
                "scale_sd": checkpoint.reward_config.scale_sd,
                "clip_sd": checkpoint.reward_config.clip_sd,
            },
            "metadata": checkpoint.metadata,
            "coachee_id": checkpoint.coachee_id,
            "layout": layout,
        }
    elif isinstance(checkpoint, WindowClassifier):
        layout, blob = _flatten_params(checkpoint.params)
        mean, std = checkpoint.norm_stats
        header = {
            "kind": "window-classifier",
            "spec": checkpoint.spec.to_dict(),
            "norm_mean": np.asarray(mean, dtype=float).tolist(),
            "norm_std": np.asarray(std, dtype=float).tolist(),
            "layout": layout,
        }
    else:
        raise TypeError(f"cannot save {type(checkpoint).__name__} as a checkpoint")
    _write_container(path, header, blob)


def load_checkpoint(path) -> Union[PolicyCheckpoint, WindowClassifier]:
    header, blob = _read_container(path)
    params = _unflatten_params(header["layout"], blob)
    kind = header.get("kind")
    if kind == "policy":
        stats = header["duration_stats"]
        rc = header["reward_config"]
        return PolicyCheckpoint(
            algorithm=header["algorithm"],
            spec=NetworkSpec.from_dict(header["spec"]),
            params=params,
            duration_stats=DurationStats(
                mean_s=stats["mean_s"], std_s=stats["std_s"], source=stats["source"]),
            reward_config=RewardConfig(
                scale_fv=rc["scale_fv"], scale_sd=rc["scale_sd"], clip_sd=rc["clip_sd"]),
            metadata=header["metadata"],
            coachee_id=header["coachee_id"],
        )
    if kind == "window-classifier":
        return WindowClassifier(
            spec=NetworkSpec.from_dict(header["spec"]),
            params=params,
            norm_stats=(
                np.asarray(header["norm_mean"], dtype=float),
                np.asarray(header["norm_std"], dtype=float),
            ),
        )
    raise CorruptFileError(f"{path}: unknown checkpoint kind {kind!r}")


# ---------------------------------------------------------------------------
# Session logs (JSONL)
# ---------------------------------------------------------------------------


def append_session_log(path, log: SessionLog) -> None:
    """One line per turn plus one summary line, appended atomically per line."""
    lines = []
    for turn in log.turns:
        row = {"record": "turn", "session_id": log.session_id}
        row.update(turn.to_dict())
        lines.append(json.dumps(row, separators=(",", ":")))
    lines.append(json.dumps(log.to_summary_dict(), separators=(",", ":")))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _log_from_rows(session_id: str, summary: dict, turns: list[dict]) -> SessionLog:
    turns = sorted(turns, key=lambda r: r["turn_index"])
    baseline = summary.get("baseline")
    return SessionLog(
        session_id=session_id,
        coachee_id=summary["coachee_id"],
        exercise=ExerciseKind(summary["exercise"]),
        session_index=summary["session_index"],
        turns=[TurnRecord.from_dict(r) for r in turns],
        termination=Termination(summary["termination"]) if summary["termination"] else None,
        intro_utterance=summary["intro_utterance"],
        first_question_utterance=summary["first_question_utterance"],
        outro_utterance=summary["outro_utterance"],
        final_utterance=summary["final_utterance"],
        baseline=BaselineValence(
            value=baseline["value"], sample_count=baseline["sample_count"]
        ) if baseline else None,
        baseline_transcript=summary["baseline_transcript"],
        baseline_moderation_checks=tuple(summary["baseline_moderation_checks"]),
        started_at=summary["started_at"],
        ended_at=summary["ended_at"],
    )


def read_session_logs(path) -> list[SessionLog]:
    """Reconstruct every session in the file, grouping lines by session id.

    Interleaved writes from concurrent sessions are fine; ordering within
    the file only matters per session, and turns carry explicit indices.
    """
    summaries: dict[str, dict] = {}
    turns: dict[str, list] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                record = row["record"]
                session_id = row["session_id"]
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise CorruptFileError(f"{path}:{lineno}: malformed log line ({err})")
            if session_id not in turns:
                turns[session_id] = []
                order.append(session_id)
            if record == "summary":
                summaries[session_id] = row
            elif record == "turn":
                turns[session_id].append(row)
            else:
                raise CorruptFileError(f"{path}:{lineno}: unknown record type {record!r}")
    logs = []
    for session_id in order:
        if session_id not in summaries:
            raise CorruptFileError(
                f"{path}: session {session_id} has turn lines but no summary")
        try:
            logs.append(_log_from_rows(session_id, summaries[session_id], turns[session_id]))
        except (KeyError, ValueError, TypeError) as err:
            raise CorruptFileError(f"{path}: session {session_id} is inconsistent ({err})")
    return logs


# ---------------------------------------------------------------------------
# Transition corpora (JSONL)
# ---------------------------------------------------------------------------


def save_transitions(path, transitions: Iterable[Transition]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in transitions:
            row = {
                "coachee_id": t.coachee_id,
                "session_index": t.session_index,
                "turn_index": t.turn_index,
                "state": list(t.state.values),
                "action": t.action.value,
                "reward": t.reward,
                "next_state": list(t.next_state.values),
                "done": t.done,
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
            count += 1
    return count


def load_transitions(path) -> tuple[Transition, ...]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                out.append(Transition(
                    state=StateVector(values=tuple(float(v) for v in row["state"])),
                    action=DialogueAction(row["action"]),
                    reward=float(row["reward"]),
                    next_state=StateVector(
                        values=tuple(float(v) for v in row["next_state"])),
                    done=bool(row["done"]),
                    coachee_id=row["coachee_id"],
                    session_index=int(row["session_index"]),
                    turn_index=int(row["turn_index"]),
                ))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as err:
                raise CorruptFileError(f"{path}:{lineno}: malformed transition ({err})")
    return tuple(out)


# ---------------------------------------------------------------------------
# Study reports and misc JSON
# ---------------------------------------------------------------------------


def save_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise CorruptFileError(f"{path}: invalid JSON ({err})")

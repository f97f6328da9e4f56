"""Append-only event log: the ground truth scenario assertions run against."""

from __future__ import annotations

import json
from dataclasses import is_dataclass
from enum import Enum


def _norm(value):
    """Fold arbitrary argument values into JSON-stable primitives."""
    if isinstance(value, bytes):
        return "0x" + value.hex()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _norm(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_norm(v) for v in value]
    if is_dataclass(value) and not isinstance(value, type):
        return str(value)
    if value is None or isinstance(value, (int, float, str, bool)):
        return value
    return str(value)


class TraceLog:
    """Ordered records plus the run's final verdicts.

    Records are plain dicts so the whole log serializes to JSON lines
    byte-identically for identical runs.
    """

    def __init__(self):
        self.records: list[dict] = []
        self.final_verdicts: list[dict] = []
        self.attack_detected = False
        self._step = 0

    def emit(self, actor, op: str, args: dict, result) -> dict:
        record = {
            "step": self._step,
            "actor": str(actor),
            "op": op,
            "args": _norm(args),
            "result": _norm(result),
        }
        self._step += 1
        self.records.append(record)
        return record

    def mark_attack_detected(self) -> None:
        self.attack_detected = True

    def add_verdict(self, verdict: dict) -> None:
        self.final_verdicts.append(_norm(verdict))

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True, separators=(",", ":"))
                 for r in self.records]
        for v in self.final_verdicts:
            lines.append(json.dumps({"verdict": v}, sort_keys=True,
                                    separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    def __len__(self) -> int:
        return len(self.records)

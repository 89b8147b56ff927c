"""Run manifests: the complete, replayable transcript of a pipeline run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping


def canonical_json(data: Any) -> str:
    """Stable serialization used for hashing and byte-identity checks."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_key(data: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:length]


@dataclass
class CallRecord:
    """One provider call: where it happened, what went out, what came back."""

    stage: str
    prompt: str
    response: str
    parsed: str | None = None
    key: tuple = ()
    attempt: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "key": list(self.key),
            "attempt": self.attempt,
            "prompt": self.prompt,
            "response": self.response,
            "parsed": self.parsed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CallRecord":
        return cls(
            stage=data["stage"],
            prompt=data["prompt"],
            response=data["response"],
            parsed=data.get("parsed"),
            key=tuple(data.get("key", ())),
            attempt=int(data.get("attempt", 0)),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """Append-only, totally ordered transcript plus config snapshot and result.

    Records are appended in a canonical order fixed by the pipeline (slot
    order, then attempt), so the manifest is identical across worker counts.
    Timestamps are excluded from the run id.
    """

    def __init__(self, config_snapshot: Mapping[str, Any]):
        self.config = dict(config_snapshot)
        self.records: list[CallRecord] = []
        self.result: Any = None
        self.started_at = _now()
        self.finished_at: str | None = None

    def record(self, record: CallRecord) -> None:
        self.records.append(record)

    def extend(self, records: Iterable[CallRecord]) -> None:
        self.records.extend(records)

    def records_for_stage(self, stage: str) -> list[CallRecord]:
        return [r for r in self.records if r.stage == stage]

    @property
    def call_count(self) -> int:
        return len(self.records)

    @property
    def run_id(self) -> str:
        body = {
            "config": self.config,
            "records": [r.to_dict() for r in self.records],
        }
        return content_key(body)

    def finalize(self, result: Any) -> None:
        self.result = result
        self.finished_at = _now()

    def transcript(self) -> list[tuple[str, str]]:
        return [(r.prompt, r.response) for r in self.records]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "records": [r.to_dict() for r in self.records],
            "result": self.result,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        manifest = cls(data.get("config", {}))
        manifest.records = [CallRecord.from_dict(r) for r in data.get("records", ())]
        manifest.result = data.get("result")
        manifest.started_at = data.get("started_at", manifest.started_at)
        manifest.finished_at = data.get("finished_at")
        return manifest

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def replay_provider(manifest: RunManifest):
    """Scripted provider rebuilt from a manifest's (prompt, response) records.

    It reports the recorded provider's id so a replayed run hashes to the
    same run id as the original.
    """
    from .providers import TranscriptProvider

    provider_id = manifest.config.get("provider", "transcript")
    return TranscriptProvider(manifest.transcript(), provider_id=provider_id)

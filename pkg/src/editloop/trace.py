"""Session traces: an append-only stream of JSON documents.

One header document, one document per executed step, plus markers for
fallback and candidate selection. Serialization is canonical (sorted
keys, no whitespace) and carries no wall-clock data, so identical runs
produce byte-identical traces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class TraceParseError(ValueError):
    """Trace file is not a valid document stream; offset marks the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def args_digest(arguments: dict) -> str:
    return hashlib.sha256(canonical_json(arguments).encode()).hexdigest()[:16]


@dataclass
class SessionTrace:
    header: dict = field(default_factory=dict)
    body: list[dict] = field(default_factory=list)

    @property
    def steps(self) -> list[dict]:
        return [doc for doc in self.body if doc.get("type") == "step"]

    @property
    def fallback(self) -> bool:
        return bool(self.header.get("fallback"))

    def documents(self) -> list[dict]:
        return [self.header] + self.body

    def to_jsonl(self) -> str:
        return "".join(canonical_json(doc) + "\n" for doc in self.documents())

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


def read_documents(path: str | Path) -> list[dict]:
    """Parse a trace file, reporting the byte offset of any failure."""
    data = Path(path).read_bytes()
    docs = []
    offset = 0
    for raw_line in data.split(b"\n"):
        if raw_line.strip():
            try:
                doc = json.loads(raw_line.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise TraceParseError(
                    f"trace parse failure at byte {offset}: {exc}", offset
                ) from exc
            if not isinstance(doc, dict):
                raise TraceParseError(
                    f"trace document at byte {offset} is not an object", offset
                )
            docs.append(doc)
        offset += len(raw_line) + 1
    if not docs:
        raise TraceParseError("trace file contains no documents", 0)
    return docs

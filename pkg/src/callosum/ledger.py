"""Append-only, hash-chained record of every feature read.

All training and inference code fetches node features through
:class:`DataAccess`, which logs one entry per (stage, node set) read. A purge
entry marks the point after which a deleted node's bytes must never be read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .serialize import canonical_json, sha256_hex
from .stgraph import STGraph

GENESIS = "0" * 64


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    kind: str            # "read" | "purge"
    stage: str
    nodes: tuple
    request: str
    prev: str
    digest: str

    def to_dict(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "stage": self.stage,
                "nodes": list(self.nodes), "request": self.request,
                "prev": self.prev, "digest": self.digest}


def _entry_digest(seq, kind, stage, nodes, request, prev) -> str:
    return sha256_hex(canonical_json([seq, kind, stage, list(nodes), request, prev]))


@dataclass
class Ledger:
    entries: list = field(default_factory=list)

    def _append(self, kind: str, stage: str, nodes: Iterable[str], request: str = "") -> LedgerEntry:
        nodes = tuple(sorted(str(n) for n in nodes))
        seq = len(self.entries)
        prev = self.entries[-1].digest if self.entries else GENESIS
        entry = LedgerEntry(seq, kind, stage, nodes, request, prev,
                            _entry_digest(seq, kind, stage, nodes, request, prev))
        self.entries.append(entry)
        return entry

    def record_read(self, stage: str, nodes: Iterable[str]) -> LedgerEntry:
        return self._append("read", stage, nodes)

    def record_purge(self, request_digest: str, nodes: Iterable[str]) -> LedgerEntry:
        return self._append("purge", "purge", nodes, request_digest)

    def copy(self) -> "Ledger":
        return Ledger(list(self.entries))

    def verify_chain(self) -> bool:
        prev = GENESIS
        for i, e in enumerate(self.entries):
            if e.seq != i or e.prev != prev:
                return False
            if e.digest != _entry_digest(e.seq, e.kind, e.stage, e.nodes, e.request, e.prev):
                return False
            prev = e.digest
        return True

    def reads_after_purge(self, request_digest: str, nodes: Iterable[str]) -> list:
        """Read entries after the purge marker of ``request_digest`` touching ``nodes``."""
        banned = {str(n) for n in nodes}
        marker = None
        for e in self.entries:
            if e.kind == "purge" and e.request == request_digest:
                marker = e.seq
        if marker is None:
            return []
        return [e for e in self.entries[marker + 1:]
                if e.kind == "read" and banned.intersection(e.nodes)]

    def has_purge(self, request_digest: str) -> bool:
        return any(e.kind == "purge" and e.request == request_digest for e in self.entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(canonical_json(e.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Ledger":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                entries.append(LedgerEntry(d["seq"], d["kind"], d["stage"], tuple(d["nodes"]),
                                           d["request"], d["prev"], d["digest"]))
        return cls(entries)


class DataAccess:
    """Logged feature reads from an :class:`STGraph` by node id."""

    def __init__(self, graph: STGraph, ledger: Optional[Ledger] = None):
        self.graph = graph
        self.ledger = ledger if ledger is not None else Ledger()

    def features(self, node_ids: Sequence[str], stage: str, t0: int = 0,
                 t1: Optional[int] = None) -> np.ndarray:
        idx = [self.graph.index_of(n) for n in node_ids]
        self.ledger.record_read(stage, node_ids)
        return np.ascontiguousarray(self.graph.features[t0:t1, idx, :])

"""Capacity-bounded bank of per-frame context embeddings.

Each entry is an (embedding, relevance, global frame index) triplet.
Appending past capacity prunes the single entry with the smallest
relevance; ties are broken toward the oldest frame, which biases
retention toward recency when scores are flat.  Recall returns the
highest-relevance frame indices, most-recent frame winning ties, sorted
back into temporal order.  Slots of frames already in the bank can be
re-measured in place; an update never evicts.

Every mutation is recorded in a flat log (step, action, frame, relevance)
that the evaluation harness serialises as CSV.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

__all__ = ["MemoryEntry", "MutationReport", "ContextMemory", "LOG_COLUMNS"]

LOG_COLUMNS = ("step", "action", "frame_index", "relevance")


@dataclass(eq=False)
class MemoryEntry:
    embedding: np.ndarray      # (slots, dim)
    relevance: float
    frame_index: int           # global, 1-based
    inserted_at: int = 0       # stamped by the bank

    def __post_init__(self) -> None:
        if self.frame_index < 1:
            raise ContractViolation(f"frame_index must be >= 1, got {self.frame_index}")
        if not np.isfinite(self.relevance):
            raise ContractViolation("relevance must be finite")


@dataclass
class MutationReport:
    appended: MemoryEntry | None = None
    pruned: MemoryEntry | None = None
    updated: MemoryEntry | None = None


class ContextMemory:
    """Mutable single-owner bank; not safe for concurrent mutation."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[MemoryEntry] = []
        self.log: list[tuple[int, str, int, float]] = []
        self._step = 0

    def __len__(self) -> int:
        return len(self.entries)

    def frame_ids(self) -> list[int]:
        return sorted(e.frame_index for e in self.entries)

    def _log(self, action: str, frame_index: int, relevance: float) -> None:
        self._step += 1
        self.log.append((self._step, action, frame_index, float(relevance)))

    def append(self, entry: MemoryEntry) -> MutationReport:
        """Add an entry; if over capacity, prune the minimum-relevance one.

        The fresh entry itself is pruned when it is the minimum.  A frame
        index already present is a contract violation: re-measured frames
        go through :meth:`update_slot` instead.
        """
        if any(e.frame_index == entry.frame_index for e in self.entries):
            raise ContractViolation(f"frame {entry.frame_index} already stored")
        entry.inserted_at = self._step + 1
        self.entries.append(entry)
        self._log("append", entry.frame_index, entry.relevance)
        report = MutationReport(appended=entry)
        if len(self.entries) > self.capacity:
            victim = min(self.entries, key=lambda e: (e.relevance, e.frame_index))
            self.entries.remove(victim)
            self._log("prune", victim.frame_index, victim.relevance)
            report.pruned = victim
        return report

    def update_slot(
        self, frame_index: int, embedding: np.ndarray, relevance: float
    ) -> MutationReport:
        """Replace a stored frame's embedding and relevance in place."""
        for e in self.entries:
            if e.frame_index == frame_index:
                e.embedding = embedding
                e.relevance = float(relevance)
                self._log("update", frame_index, e.relevance)
                return MutationReport(updated=e)
        raise KeyError(f"frame {frame_index} not in memory")

    def recall(self, k: int) -> list[int]:
        """Top-k frame indices by relevance, returned in temporal order.

        Ties go to the more recent frame.  Fewer than k entries means all
        of them come back; an empty bank recalls nothing.
        """
        if k <= 0 or not self.entries:
            return []
        ranked = sorted(self.entries, key=lambda e: (-e.relevance, -e.frame_index))
        chosen = sorted(e.frame_index for e in ranked[: min(k, len(ranked))])
        for fid in chosen:
            rel = next(e.relevance for e in self.entries if e.frame_index == fid)
            self._log("recall", fid, rel)
        return chosen

    def snapshot_for_decoder(self) -> np.ndarray:
        """All stored embeddings concatenated in ascending frame order."""
        ordered = sorted(self.entries, key=lambda e: e.frame_index)
        if not ordered:
            return np.zeros((0, 0))
        return np.concatenate([e.embedding for e in ordered], axis=0)

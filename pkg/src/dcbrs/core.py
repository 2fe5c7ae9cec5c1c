"""Domain types and the fixed-capacity replay memory."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


class MemoryStateError(RuntimeError):
    """Raised when the replay memory is driven into an invalid state."""


@dataclass(frozen=True, eq=False)
class Instance:
    """One labeled example from a stream.

    ``label`` is the (possibly merged) class; ``sub_label`` keeps the original
    class when classes were merged, or the blob id for synthetic data.
    """

    id: int
    features: np.ndarray
    label: int
    sub_label: Optional[int] = None

    def __repr__(self) -> str:
        return f"Instance(id={self.id}, label={self.label}, sub_label={self.sub_label})"


@dataclass
class Batch:
    instances: list[Instance] = field(default_factory=list)
    origin: str = "stream"  # stream | memory | concatenated

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @classmethod
    def concat(cls, *batches: "Batch") -> "Batch":
        out: list[Instance] = []
        for b in batches:
            out.extend(b.instances)
        return cls(out, origin="concatenated")

    def arrays(self, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """Stack into a (n, d) feature matrix and an (n,) label vector."""
        if not self.instances:
            return np.zeros((0, 0), dtype=dtype), np.zeros(0, dtype=np.int64)
        x = np.stack([inst.features for inst in self.instances]).astype(dtype, copy=False)
        y = np.fromiter((inst.label for inst in self.instances), dtype=np.int64,
                        count=len(self.instances))
        return x, y


class MemoryBuffer:
    """Fixed-capacity slot store with per-class bookkeeping.

    Slots are stable integers in ``[0, capacity)``; a replacement reuses the
    victim's slot. ``stream_counts`` is maintained by the sampling policy,
    the buffer only stores it.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.slots: list[Optional[Instance]] = [None] * self.capacity
        self.class_index: dict[int, set[int]] = {}
        self.full_classes: set[int] = set()
        self.stream_counts: dict[int, int] = {}
        self.cluster_stream_counts: dict[tuple[int, int], int] = {}
        self._occupancy = 0

    def __len__(self) -> int:
        return self._occupancy

    @property
    def occupancy(self) -> int:
        return self._occupancy

    def is_filled(self) -> bool:
        return self._occupancy == self.capacity

    def class_count(self, label: int) -> int:
        return len(self.class_index.get(label, ()))

    def class_counts(self) -> dict[int, int]:
        return {c: len(s) for c, s in sorted(self.class_index.items()) if s}

    def class_slots(self, label: int) -> list[int]:
        """Occupied slot ids of ``label`` in ascending order."""
        return sorted(self.class_index.get(label, ()))

    def occupied_slots(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s is not None]

    def instances(self) -> list[Instance]:
        return [s for s in self.slots if s is not None]

    def features(self, slots: Iterable[int]) -> np.ndarray:
        return np.stack([self.slots[i].features for i in slots])

    def store(self, incoming: Instance) -> int:
        """Place ``incoming`` in the lowest free slot; returns the slot id."""
        if self.is_filled():
            raise MemoryStateError("store() on a filled memory")
        # Slots fill in order and are never freed, so the next free slot is
        # always the current occupancy.
        slot = self._occupancy
        self.slots[slot] = incoming
        self.class_index.setdefault(incoming.label, set()).add(slot)
        self._occupancy += 1
        return slot

    def replace(self, victim_slot: int, incoming: Instance) -> Instance:
        if not 0 <= victim_slot < self.capacity or self.slots[victim_slot] is None:
            raise MemoryStateError(f"slot {victim_slot} is not occupied")
        evicted = self.slots[victim_slot]
        self.class_index[evicted.label].discard(victim_slot)
        self.slots[victim_slot] = incoming
        self.class_index.setdefault(incoming.label, set()).add(victim_slot)
        return evicted

    def update_full_classes(self) -> set[int]:
        """Mark every label tied for the largest in-memory count as full."""
        if not self.is_filled():
            raise MemoryStateError("update_full_classes() requires a filled memory")
        counts = self.class_counts()
        if not counts:
            return set()
        top = max(counts.values())
        new = {c for c, n in counts.items() if n == top and c not in self.full_classes}
        self.full_classes |= new
        return new

    def sample_replay_batch(self, k: int, rng: np.random.Generator) -> Batch:
        if k < 0:
            raise ValueError("k must be >= 0")
        k = min(k, self._occupancy)
        if k == 0:
            return Batch([], origin="memory")
        # Occupied slots are always the prefix [0, occupancy).
        picks = rng.choice(self._occupancy, size=k, replace=False)
        return Batch([self.slots[i] for i in picks], origin="memory")

    def snapshot(self) -> list[tuple[int, int, Optional[int]]]:
        """(instance id, label, sub_label) per slot, for read-only metrics."""
        return [(s.id, s.label, s.sub_label) for s in self.slots if s is not None]


def is_filled(buffer: MemoryBuffer) -> bool:
    return buffer.is_filled()


def update_full_classes(buffer: MemoryBuffer) -> set[int]:
    return buffer.update_full_classes()


def sample_replay_batch(buffer: MemoryBuffer, k: int, rng: np.random.Generator) -> Batch:
    return buffer.sample_replay_batch(k, rng)


def replace(buffer: MemoryBuffer, victim_slot: int, incoming: Instance) -> Instance:
    return buffer.replace(victim_slot, incoming)

"""Streaming memory-management policies: Reservoir, CBRS and D-CBRS.

All three share one contract: ``policy.observe(instance)`` mutates the
policy's :class:`MemoryBuffer` and returns a :class:`MemoryEvent`.

Randomness is split into named sub-streams (full-class choice, victim choice,
acceptance draws, clustering) so that CBRS and D-CBRS run with the same seed
pick the same full class at every eviction. Their per-class counts therefore
evolve identically; only which instance of a class is evicted differs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import Clustering, assign, kmeans_fit
from .core import Instance, MemoryBuffer, MemoryStateError
from .seeding import sub_rng

POLICY_KINDS = ("reservoir", "cbrs", "dcbrs")
CLUSTERER_KINDS = ("kmeans", "oracle")
FULL_CLASS_CHOICES = ("largest", "uniform")


class ConfigurationError(ValueError):
    pass


class MemoryEvent(NamedTuple):
    kind: str  # stored | replaced | rejected
    slot: Optional[int] = None
    evicted: Optional[Instance] = None


@dataclass(frozen=True)
class PolicyKind:
    name: str
    clusterer: Optional[str] = None

    def __post_init__(self):
        if self.name not in POLICY_KINDS:
            raise ConfigurationError(f"unknown policy {self.name!r}")
        if self.name == "dcbrs":
            if self.clusterer not in CLUSTERER_KINDS:
                raise ConfigurationError(f"dcbrs needs a clusterer in {CLUSTERER_KINDS}")
        elif self.clusterer is not None:
            raise ConfigurationError(f"{self.name} takes no clusterer")

    @classmethod
    def parse(cls, text: str) -> "PolicyKind":
        """``reservoir``, ``cbrs``, ``dcbrs`` (k-means), ``dcbrs-oracle``, ``dcbrs-kmeans``."""
        text = text.strip().lower()
        aliases = {"rs": "reservoir", "d-cbrs": "dcbrs"}
        if text.startswith("dcbrs") or text.startswith("d-cbrs"):
            _, _, clusterer = text.partition("-cbrs" if text.startswith("d-") else "dcbrs")
            clusterer = clusterer.lstrip("-") or "kmeans"
            return cls("dcbrs", clusterer)
        return cls(aliases.get(text, text))

    def __str__(self) -> str:
        return f"dcbrs-{self.clusterer}" if self.name == "dcbrs" else self.name


class Policy:
    """Shared state: the buffer, the observation count and seeded generators."""

    kind = "base"

    def __init__(self, capacity: int, seed: int = 0, full_class_choice: str = "largest"):
        if full_class_choice not in FULL_CLASS_CHOICES:
            raise ConfigurationError(f"full_class_choice must be one of {FULL_CLASS_CHOICES}")
        self.full_class_choice = full_class_choice
        self.buffer = MemoryBuffer(capacity)
        self.total_observed = 0
        self.seed = int(seed)
        self.rng_class = sub_rng(seed, "policy", "class")
        self.rng_victim = sub_rng(seed, "policy", "victim")
        self.rng_accept = sub_rng(seed, "policy", "accept")

    def observe(self, instance: Instance) -> MemoryEvent:
        self.total_observed += 1
        counts = self.buffer.stream_counts
        counts[instance.label] = counts.get(instance.label, 0) + 1
        return self._observe(instance)

    def _observe(self, instance: Instance) -> MemoryEvent:
        raise NotImplementedError

    def _store(self, instance: Instance) -> MemoryEvent:
        return MemoryEvent("stored", self.buffer.store(instance))

    def _replace(self, slot: int, instance: Instance) -> MemoryEvent:
        return MemoryEvent("replaced", slot, self.buffer.replace(slot, instance))

    def _pick(self, slots: list[int]) -> int:
        return slots[int(self.rng_victim.integers(len(slots)))]

    def _random_full_class(self) -> int:
        """Victim class for an arrival from a non-full class.

        "largest" draws uniformly among the full classes with the highest
        in-memory count, which keeps the memory balanced; "uniform" draws
        among all non-empty full classes.
        """
        buf = self.buffer
        candidates = sorted(c for c in buf.full_classes if buf.class_count(c))
        if not candidates:
            raise MemoryStateError("no non-empty full class to evict from")
        if self.full_class_choice == "largest":
            top = max(buf.class_count(c) for c in candidates)
            candidates = [c for c in candidates if buf.class_count(c) == top]
        return candidates[int(self.rng_class.integers(len(candidates)))]


class ReservoirPolicy(Policy):
    """Keeps a uniform random subset: item n is stored with probability m/n."""

    kind = "reservoir"

    def _observe(self, instance):
        buf = self.buffer
        if not buf.is_filled():
            return self._store(instance)
        if buf.capacity == 0:
            return MemoryEvent("rejected")
        j = int(self.rng_victim.integers(self.total_observed))
        if j < buf.capacity:
            return self._replace(j, instance)
        return MemoryEvent("rejected")


class CBRSPolicy(Policy):
    kind = "cbrs"

    def _observe(self, instance):
        buf = self.buffer
        if not buf.is_filled():
            return self._store(instance)
        if buf.capacity == 0:
            return MemoryEvent("rejected")
        buf.update_full_classes()
        y = instance.label
        if y not in buf.full_classes:
            victim_class = self._random_full_class()
            return self._replace(self._pick(buf.class_slots(victim_class)), instance)
        m_c = buf.class_count(y)
        n_c = buf.stream_counts[y]
        if m_c and self.rng_accept.random() <= m_c / n_c:
            return self._replace(self._pick(buf.class_slots(y)), instance)
        return MemoryEvent("rejected")


@dataclass
class _ClassClusters:
    """Cached clustering of one class's memory, keyed by slot id."""

    members: dict[int, int]  # slot -> cluster id
    clustering: Optional[Clustering] = None
    age: int = 0
    ids: list[int] = field(default_factory=list)
    ids_by_position: list[int] = field(default_factory=list)  # k-means index -> id

    def sizes(self) -> dict[int, int]:
        out = {j: 0 for j in self.ids}
        for j in self.members.values():
            out[j] = out.get(j, 0) + 1
        return out

    def slots_of(self, cluster: int) -> list[int]:
        return sorted(s for s, j in self.members.items() if j == cluster)


@dataclass
class Decision:
    """What D-CBRS saw when it last evicted or rejected (for auditing)."""

    label: int
    sizes: dict[int, int]
    largest: int
    victim_cluster: Optional[int]
    incoming_cluster: Optional[int]


class DCBRSPolicy(CBRSPolicy):
    """CBRS that evicts from the largest cluster of a full class.

    ``clusterer="kmeans"`` re-clusters a class's memory with k-means (k
    clusters, refreshed every ``refresh`` uses of that class); ``"oracle"``
    partitions by the true ``sub_label``.

    Under k-means, cluster ids are aligned to the previous clustering of the
    class by maximum slot overlap. Per-cluster stream counters carry over when
    fewer than ``change_threshold`` of the shared slots changed cluster;
    otherwise they are re-seeded to the in-memory cluster sizes.
    """

    kind = "dcbrs"

    def __init__(self, capacity: int, seed: int = 0, clusterer: str = "kmeans",
                 k: int = 2, refresh: int = 1, max_iters: int = 50, tol: float = 1e-4,
                 n_init: int = 1, change_threshold: float = 0.1, full_class_choice: str = "largest"):
        super().__init__(capacity, seed, full_class_choice)
        if clusterer not in CLUSTERER_KINDS:
            raise ConfigurationError(f"unknown clusterer {clusterer!r}")
        if k < 1 or refresh < 1 or n_init < 1:
            raise ConfigurationError("k, refresh and n_init must be >= 1")
        self.clusterer = clusterer
        self.k = k
        self.refresh = refresh
        self.max_iters = max_iters
        self.tol = tol
        self.n_init = n_init
        self.change_threshold = change_threshold
        self.rng_cluster = sub_rng(seed, "policy", "cluster")
        self.n_reclusters = 0
        self.n_reseeds = 0
        self.last_decision: Optional[Decision] = None
        self._cache: dict[int, _ClassClusters] = {}

    def observe(self, instance):
        if self.clusterer == "oracle":
            if instance.sub_label is None:
                raise ConfigurationError("oracle D-CBRS requires sub_label on every instance")
            # Sub-labels are known up front, so every one seen gets a counter.
            self.buffer.cluster_stream_counts.setdefault((instance.label, instance.sub_label), 0)
            self.cluster_stream_count_update(instance.label, instance.sub_label)
        return super().observe(instance)

    # -- clustering -------------------------------------------------------

    def clusters(self, label: int) -> _ClassClusters:
        """Current clustering of ``label``'s memory (re-clustered if stale)."""
        if self.clusterer == "oracle":
            members = {s: self.buffer.slots[s].sub_label for s in self.buffer.class_slots(label)}
            return _ClassClusters(members, ids=sorted(set(members.values())))
        cached = self._cache.get(label)
        if cached is not None and cached.age < self.refresh and cached.members:
            cached.age += 1
            return cached
        fresh = self._recluster(label, cached)
        fresh.age = 1
        self._cache[label] = fresh
        return fresh

    def _recluster(self, label: int, previous: Optional[_ClassClusters]) -> _ClassClusters:
        slots = self.buffer.class_slots(label)
        fit = kmeans_fit(self.buffer.features(slots), self.k, self.rng_cluster,
                         max_iters=self.max_iters, tol=self.tol, n_init=self.n_init)
        self.n_reclusters += 1
        ids = np.arange(fit.k)
        changed = 1.0
        if previous is not None and previous.members:
            common = [i for i, s in enumerate(slots) if s in previous.members]
            if common:
                old = np.array([previous.members[slots[i]] for i in common])
                new = fit.assignments[common]
                width = max(fit.k, max(previous.ids) + 1)
                overlap = np.zeros((fit.k, width))
                np.add.at(overlap, (new, old), 1)
                rows, cols = linear_sum_assignment(-overlap)
                ids = np.empty(fit.k, dtype=np.int64)
                ids[rows] = cols
                changed = 1.0 - overlap[rows, cols].sum() / len(common)
        members = {s: int(ids[a]) for s, a in zip(slots, fit.assignments)}
        out = _ClassClusters(members, clustering=fit, ids=sorted(int(i) for i in ids),
                             ids_by_position=[int(i) for i in ids])
        counters = self.buffer.cluster_stream_counts
        sizes = out.sizes()
        if changed > self.change_threshold:
            self.n_reseeds += 1
            for key in [key for key in counters if key[0] == label]:
                del counters[key]
            for j, m_c in sizes.items():
                counters[(label, j)] = m_c
        else:
            for j, m_c in sizes.items():
                counters[(label, j)] = max(counters.get((label, j), 0), m_c)
        return out

    def _assign_incoming(self, cc: _ClassClusters, instance: Instance) -> int:
        if self.clusterer == "oracle":
            return instance.sub_label
        return cc.ids_by_position[assign(instance.features, cc.clustering)]

    def cluster_stream_count_update(self, label: int, cluster_id: int) -> int:
        key = (label, cluster_id)
        counters = self.buffer.cluster_stream_counts
        if self.clusterer == "kmeans":
            cc = self._cache.get(label)
            known = cc is not None and cluster_id in cc.ids
        else:
            known = key in counters
        if not known:
            raise KeyError(f"no cluster {cluster_id} for class {label}")
        counters[key] = counters.get(key, 0) + 1
        return counters[key]

    def _largest(self, cc: _ClassClusters) -> tuple[int, dict[int, int]]:
        sizes = {j: n for j, n in cc.sizes().items() if n > 0}
        top = max(sizes.values())
        tied = sorted(j for j, n in sizes.items() if n == top)
        if len(tied) == 1:
            return tied[0], sizes
        return tied[int(self.rng_victim.integers(len(tied)))], sizes

    # -- policy -----------------------------------------------------------

    def _evict(self, label: int, cc: _ClassClusters, largest: int, sizes: dict[int, int],
               incoming: Instance, incoming_cluster: Optional[int]) -> MemoryEvent:
        slot = self._pick(cc.slots_of(largest))
        self.last_decision = Decision(label, sizes, largest, largest, incoming_cluster)
        event = self._replace(slot, incoming)
        if self.clusterer == "kmeans":
            if incoming.label == label:
                cc.members[slot] = incoming_cluster
            else:
                del cc.members[slot]
        return event

    def _observe(self, instance):
        buf = self.buffer
        if not buf.is_filled():
            return self._store(instance)
        if buf.capacity == 0:
            return MemoryEvent("rejected")
        buf.update_full_classes()
        y = instance.label
        if y not in buf.full_classes:
            victim_class = self._random_full_class()
            cc = self.clusters(victim_class)
            largest, sizes = self._largest(cc)
            return self._evict(victim_class, cc, largest, sizes, instance, None)

        if buf.class_count(y) == 0:
            # Full class drained to nothing: nothing of its own to displace.
            return MemoryEvent("rejected")
        cc = self.clusters(y)
        j = self._assign_incoming(cc, instance)
        if self.clusterer == "kmeans":
            self.cluster_stream_count_update(y, j)
        largest, sizes = self._largest(cc)
        if j != largest:
            return self._evict(y, cc, largest, sizes, instance, j)
        m_c = sizes[largest]
        n_c = buf.cluster_stream_counts[(y, largest)]
        if self.rng_accept.random() <= m_c / n_c:
            return self._evict(y, cc, largest, sizes, instance, j)
        self.last_decision = Decision(y, sizes, largest, None, j)
        return MemoryEvent("rejected")


def make_policy(kind: PolicyKind | str, capacity: int, seed: int = 0,
                full_class_choice: str = "largest", **dcbrs_options) -> Policy:
    """Build a policy; ``dcbrs_options`` are ignored by reservoir and CBRS."""
    if isinstance(kind, str):
        kind = PolicyKind.parse(kind)
    if kind.name == "reservoir":
        return ReservoirPolicy(capacity, seed)
    if kind.name == "cbrs":
        return CBRSPolicy(capacity, seed, full_class_choice)
    return DCBRSPolicy(capacity, seed, clusterer=kind.clusterer,
                       full_class_choice=full_class_choice, **dcbrs_options)


def observe(state: Policy, instance: Instance) -> MemoryEvent:
    return state.observe(instance)

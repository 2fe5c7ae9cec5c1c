"""Seeded experiment runner, metrics and report export.

Scenarios:

* ``base`` -- class imbalance only.
* ``omniscient`` -- imbalance plus merged classes, D-CBRS clusters by the true
  original label.
* ``realistic`` -- imbalance plus merged classes, D-CBRS clusters with k-means.

Seed scheme: ``run_seed(seed, i)`` gives the i-th run seed; every consumer
draws from ``sub_rng(run_seed, name)`` with name in {retention, merge,
shuffle, init, replay, synthetic, synthetic-test, composition}. The policy
seeds its own sub-streams from the run seed. Dataset randomness therefore
never depends on which policies are run.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import tempfile
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .clustering import kmeans_fit
from .core import MemoryBuffer
from .model import TrainConfig, evaluate, mlp_init, train_with_replay
from .samplers import ConfigurationError, PolicyKind, make_policy
from .seeding import run_seed, sub_rng
from .streams import (RETENTION_FACTORS, Dataset, apply_merge, apply_retention,
                      build_stream, load_split, make_synthetic, merge_groups, parse_synthetic)

log = logging.getLogger(__name__)

SCENARIOS = ("base", "omniscient", "realistic")
DATASET_ALIASES = {"mnist": "mnist", "fashion-mnist": "fashion-mnist", "fmnist": "fashion-mnist",
                   "f-mnist": "fashion-mnist", "synthetic": "synthetic"}


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_dir: Optional[str] = None  # IDX directory; default $DCBRS_DATA/<dataset> or data/<dataset>
    synthetic_spec: Optional[str] = None  # path to a blob document
    scenario: str = "base"
    policies: tuple[str, ...] = ("reservoir", "cbrs", "dcbrs")
    memory_size: int = 500
    batch_size: int = 10
    replay_steps: int = 5
    merge_target: int = 5
    retention: tuple[float, ...] = RETENTION_FACTORS
    clusters_per_class: int = 2
    refresh: int = 1
    kmeans_max_iters: int = 50
    kmeans_tol: float = 1e-4
    kmeans_restarts: int = 1
    recluster_change_threshold: float = 0.1
    full_class_choice: str = "largest"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"
    seed: int = 0
    runs: int = 5
    jobs: int = 1
    warn_seconds: float = 1800.0
    timing: bool = False  # wall-clock fields make reports non-reproducible

    def __post_init__(self):
        self.policies = tuple(self.policies)
        self.retention = tuple(float(f) for f in self.retention)

    def validate(self) -> None:
        if self.dataset not in DATASET_ALIASES:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        self.dataset = DATASET_ALIASES[self.dataset]
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}")
        if self.dataset == "synthetic" and not self.synthetic_spec:
            raise ConfigurationError("synthetic dataset needs synthetic_spec")
        for name in ("memory_size",):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("batch_size", "replay_steps", "runs", "clusters_per_class", "refresh",
                     "kmeans_max_iters", "kmeans_restarts", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.retention or any(not 0 < f <= 1 for f in self.retention):
            raise ConfigurationError("retention factors must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.scenario != "base" and self.merge_target < 1:
            raise ConfigurationError(f"{self.scenario} scenario needs merge_target >= 1")
        if not self.policies:
            raise ConfigurationError("no policies given")
        kinds = [self.policy_kind(p) for p in self.policies]
        if len(set(map(str, kinds))) != len(kinds):
            raise ConfigurationError("duplicate policies")
        if self.full_class_choice not in ("largest", "uniform"):
            raise ConfigurationError("full_class_choice must be largest or uniform")

    def policy_kind(self, name: str) -> PolicyKind:
        """Plain ``dcbrs`` means oracle clustering in the omniscient scenario, k-means otherwise."""
        kind = PolicyKind.parse(name)
        if kind.name == "dcbrs" and name.strip().lower() in ("dcbrs", "d-cbrs"):
            kind = PolicyKind("dcbrs", "oracle" if self.scenario == "omniscient" else "kmeans")
        if kind.clusterer == "oracle" and self.scenario == "base" and self.dataset != "synthetic":
            raise ConfigurationError("oracle clustering needs sub-labels: use a merged scenario "
                                     "or synthetic data")
        return kind

    def resolved_data_dir(self) -> Path:
        if self.data_dir:
            return Path(self.data_dir)
        return Path(os.environ.get("DCBRS_DATA", "data")) / self.dataset

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policies"] = list(self.policies)
        d["retention"] = list(self.retention)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    scenario: str
    dataset: str
    policy: str
    run: int
    seed: int
    accuracy: float
    steps: int
    composition: list[list]  # [label, sub_label or cluster, count]
    composition_estimated: bool
    class_counts: dict[str, int]
    class_order: list[int]
    retention: dict[str, float]
    merge_map: Optional[dict[str, int]]
    stream_length: int
    reclusters: int = 0
    wall_seconds: Optional[float] = None


@dataclass
class Aggregate:
    scenario: str
    dataset: str
    policy: str
    n_runs: int
    mean: float
    ci_half_width: Optional[float]


@dataclass
class RunReport:
    config: dict
    runs: list[RunRecord] = field(default_factory=list)
    extra_configs: list[dict] = field(default_factory=list)

    @property
    def aggregates(self) -> list[Aggregate]:
        groups: dict[tuple, list[float]] = {}
        for r in self.runs:
            groups.setdefault((r.scenario, r.dataset, r.policy), []).append(r.accuracy)
        out = []
        for (scenario, dataset, policy), values in groups.items():
            mean, half = summarize(values)
            out.append(Aggregate(scenario, dataset, policy, len(values), mean, half))
        return out

    def aggregate(self, policy: str, scenario: Optional[str] = None,
                  dataset: Optional[str] = None) -> Aggregate:
        for a in self.aggregates:
            if a.policy == policy and scenario in (None, a.scenario) and dataset in (None, a.dataset):
                return a
        raise KeyError(policy)

    def to_dict(self) -> dict:
        return {"config": self.config,
                "extra_configs": self.extra_configs,
                "runs": [dataclasses.asdict(r) for r in self.runs],
                "aggregates": [dataclasses.asdict(a) for a in self.aggregates]}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["config"], [RunRecord(**r) for r in d["runs"]], d.get("extra_configs", []))


def merge_reports(reports: Sequence[RunReport]) -> RunReport:
    if not reports:
        raise ValueError("no reports to merge")
    out = RunReport(reports[0].config, list(reports[0].runs), list(reports[0].extra_configs))
    for r in reports[1:]:
        out.runs.extend(r.runs)
        out.extra_configs.append(r.config)
        out.extra_configs.extend(r.extra_configs)
    return out


# -- metrics --------------------------------------------------------------------


def summarize(values: Sequence[float]) -> tuple[float, Optional[float]]:
    """Mean and Student-t 95% CI half-width (None for fewer than two values)."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no values")
    mean = float(x.mean())
    if len(x) < 2:
        return mean, None
    s = float(x.std(ddof=1))
    return mean, float(stats.t.ppf(0.975, len(x) - 1) * s / math.sqrt(len(x)))


def memory_composition(buffer: MemoryBuffer, rng: Optional[np.random.Generator] = None,
                       k: int = 2) -> tuple[dict[tuple[int, int], int], bool]:
    """Counts per (label, sub_label) and whether they are estimated.

    Without sub-labels each class's final memory is split with k-means and
    the cluster ids stand in for sub-labels (``estimated=True``).
    """
    items = buffer.instances()
    if not items:
        raise ValueError("empty memory")
    if all(i.sub_label is not None for i in items):
        return dict(sorted(Counter((i.label, i.sub_label) for i in items).items())), False
    rng = rng if rng is not None else np.random.default_rng(0)
    out: dict[tuple[int, int], int] = {}
    for label in sorted(buffer.class_counts()):
        slots = buffer.class_slots(label)
        fit = kmeans_fit(buffer.features(slots), k, rng)
        for j, n in enumerate(fit.sizes):
            if n:
                out[(label, j)] = int(n)
    return out, True


# -- data -----------------------------------------------------------------------


_CACHE: dict[tuple, tuple[Dataset, Dataset]] = {}


def load_data(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(train, test) before retention and merging."""
    if cfg.dataset == "synthetic":
        blobs = parse_synthetic(Path(cfg.synthetic_spec).read_text())
        train = make_synthetic(blobs, sub_rng(seed, "synthetic"))
        test = make_synthetic(blobs, sub_rng(seed, "synthetic-test"))
        return train, test
    root = cfg.resolved_data_dir()
    key = (str(root),)
    if key not in _CACHE:
        _CACHE[key] = (load_split(root, "train"), load_split(root, "t10k"))
    return _CACHE[key]


def prepare_run(cfg: RunConfig, seed: int):
    """Dataset, test set and stream for one run; shared by every policy."""
    train, test = load_data(cfg, seed)
    data = apply_retention(train, cfg.retention, sub_rng(seed, "retention"))
    if cfg.scenario != "base":
        if cfg.merge_target > data.class_count:
            raise ConfigurationError(f"merge_target {cfg.merge_target} exceeds "
                                     f"{data.class_count} classes")
        merge_map = merge_groups(data.class_count, cfg.merge_target, sub_rng(seed, "merge"))
        data = apply_merge(data, merge_map)
        test = apply_merge(test, merge_map)
    stream = build_stream(data, cfg.batch_size, sub_rng(seed, "shuffle"))
    return data, test, stream


def _run_one(cfg: RunConfig, run: int) -> list[RunRecord]:
    seed = run_seed(cfg.seed, run)
    data, test, stream = prepare_run(cfg, seed)
    records = []
    for name in cfg.policies:
        kind = cfg.policy_kind(name)
        start = time.perf_counter()
        policy = make_policy(kind, cfg.memory_size, seed, full_class_choice=cfg.full_class_choice,
                             **({"k": cfg.clusters_per_class, "refresh": cfg.refresh,
                                 "max_iters": cfg.kmeans_max_iters, "tol": cfg.kmeans_tol,
                                 "n_init": cfg.kmeans_restarts,
                                 "change_threshold": cfg.recluster_change_threshold}
                                if kind.name == "dcbrs" else {}))
        params = mlp_init(data.dim, data.class_count, sub_rng(seed, "init"), dtype=cfg.dtype)
        tc = TrainConfig(batch_size=cfg.batch_size, replay_steps=cfg.replay_steps, seed=seed,
                         dtype=cfg.dtype, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        result = train_with_replay(params, stream, policy, tc, sub_rng(seed, "replay"))
        acc = evaluate(params, test, data.merge_map)
        if len(policy.buffer):
            comp, estimated = memory_composition(policy.buffer, sub_rng(seed, "composition"),
                                                 cfg.clusters_per_class)
        else:
            comp, estimated = {}, False
        elapsed = time.perf_counter() - start
        if elapsed > cfg.warn_seconds:
            log.warning("run %d policy %s took %.0f s (> %.0f s)", run, kind, elapsed,
                        cfg.warn_seconds)
        records.append(RunRecord(
            scenario=cfg.scenario, dataset=cfg.dataset, policy=str(kind), run=run, seed=seed,
            accuracy=acc, steps=result.steps,
            composition=[[int(a), int(b), int(n)] for (a, b), n in comp.items()],
            composition_estimated=estimated,
            class_counts={str(c): n for c, n in policy.buffer.class_counts().items()},
            class_order=[int(c) for c in stream.class_order],
            retention={str(c): f for c, f in data.retention.per_class.items()},
            merge_map=None if data.merge_map is None else {str(a): b for a, b in data.merge_map.items()},
            stream_length=stream.n_instances,
            reclusters=getattr(policy, "n_reclusters", 0),
            wall_seconds=round(elapsed, 3) if cfg.timing else None))
        log.info("%s/%s run %d %s: accuracy %.4f", cfg.scenario, cfg.dataset, run, kind, acc)
    return records


def run_experiment(cfg: RunConfig) -> RunReport:
    cfg.validate()
    if cfg.dataset != "synthetic":
        root = cfg.resolved_data_dir()
        for split in ("train", "t10k"):
            for part in ("images-idx3", "labels-idx1"):
                if not (root / f"{split}-{part}-ubyte").exists():
                    raise FileNotFoundError(f"missing {root / f'{split}-{part}-ubyte'}")
    report = RunReport(cfg.to_dict())
    if cfg.jobs > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for records in pool.map(_run_one, [cfg] * cfg.runs, range(cfg.runs)):
                report.runs.extend(records)
    else:
        for run in range(cfg.runs):
            report.runs.extend(_run_one(cfg, run))
    return report


# -- export ---------------------------------------------------------------------


CSV_FIELDS = ("row", "scenario", "dataset", "policy", "run", "seed", "accuracy", "n_runs",
              "mean", "ci_half_width")


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in report.runs:
        w.writerow(["run", r.scenario, r.dataset, r.policy, r.run, r.seed, repr(r.accuracy),
                    "", "", ""])
    for a in report.aggregates:
        w.writerow(["aggregate", a.scenario, a.dataset, a.policy, "", "", "", a.n_runs,
                    repr(a.mean), "" if a.ci_half_width is None else repr(a.ci_half_width)])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def export_report(report: RunReport, path, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2) + "\n"
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    _atomic_write(path, text)
    return path


def load_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


def format_table(report: RunReport) -> str:
    lines = [f"{'scenario':<11}{'dataset':<15}{'policy':<15}{'runs':>5}  accuracy (%)"]
    for a in report.aggregates:
        ci = "" if a.ci_half_width is None else f" ± {100 * a.ci_half_width:.1f}"
        lines.append(f"{a.scenario:<11}{a.dataset:<15}{a.policy:<15}{a.n_runs:>5}  "
                     f"{100 * a.mean:.1f}{ci}")
    return "\n".join(lines)

"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

Criteria 1-4 train networks on MNIST and Fashion-MNIST (5 seeded runs per
setting; about an hour on one core). Their reports are cached under
``.acceptance-cache/``, keyed by the run configuration and a hash of the
package source, so a cache hit is the same computation re-read. Set
``DCBRS_ACCEPTANCE_CACHE=off`` to always recompute.
"""

import hashlib
import json
import math
import os
import subprocess
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import dcbrs
from dcbrs.core import Instance
from dcbrs.clustering import kmeans_fit
from dcbrs.harness import RunConfig, RunReport, export_report, load_report, run_experiment
from dcbrs.model import loss_and_grads, mlp_init
from dcbrs.samplers import CBRSPolicy, ReservoirPolicy, make_policy
from dcbrs.seeding import sub_rng
from dcbrs.streams import build_stream, figure_fixture, format_synthetic, make_synthetic

from conftest import ACCEPTANCE_LINES, REPO, dataset_dir, have_dataset

CACHE = REPO / ".acceptance-cache"
FAST_REFRESH = 10  # the documented R > 1 fast mode

# Paper means (%) used by criteria 3 and 4.
PAPER = {
    ("base", "mnist"): {"reservoir": 66.9, "cbrs": 82.8, "dcbrs": 80.6},
    ("base", "fashion-mnist"): {"reservoir": 62.3, "cbrs": 75.0, "dcbrs": 73.1},
    ("omniscient", "mnist"): {"reservoir": 66.3, "cbrs": 76.8, "dcbrs": 84.6},
    ("omniscient", "fashion-mnist"): {"reservoir": 64.7, "cbrs": 70.3, "dcbrs": 76.9},
    ("realistic-5", "mnist"): {"reservoir": 66.3, "cbrs": 75.2, "dcbrs": 79.7},
    ("realistic-5", "fashion-mnist"): {"reservoir": 65.5, "cbrs": 70.9, "dcbrs": 72.9},
    ("realistic-3", "mnist"): {"reservoir": 73.7, "cbrs": 72.7, "dcbrs": 80.6},
    ("realistic-3", "fashion-mnist"): {"reservoir": 75.8, "cbrs": 72.8, "dcbrs": 78.0},
}

SETTINGS = {
    "base": dict(scenario="base"),
    "omniscient": dict(scenario="omniscient", merge_target=5),
    "realistic-5": dict(scenario="realistic", merge_target=5),
    "realistic-3": dict(scenario="realistic", merge_target=3),
}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def _source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(dcbrs.__file__).parent.glob("*.py")):
        h.update(path.name.encode() + path.read_bytes())
    return h.hexdigest()[:16]


def experiment(cfg: RunConfig) -> RunReport:
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    path = CACHE / f"{cfg.dataset}-{cfg.scenario}-{cfg.merge_target}-{key}-{_source_hash()}.json"
    use_cache = os.environ.get("DCBRS_ACCEPTANCE_CACHE", "on").lower() not in ("0", "off", "no")
    if use_cache and path.exists():
        return load_report(path)
    report = run_experiment(cfg)
    if use_cache:
        CACHE.mkdir(exist_ok=True)
        export_report(report, path)
    return report


def setting_config(dataset: str, setting: str, **overrides) -> RunConfig:
    return RunConfig(dataset=dataset, data_dir=str(dataset_dir(dataset)),
                     policies=("reservoir", "cbrs", "dcbrs"), **SETTINGS[setting], **overrides)


class Results:
    """Lazily computed reports for every (dataset, setting)."""

    def __init__(self):
        self.reports = {}

    def report(self, dataset, setting, **overrides) -> RunReport:
        key = (dataset, setting, tuple(sorted(overrides.items())))
        if key not in self.reports:
            if not have_dataset(dataset):
                pytest.skip(f"{dataset} IDX files not found under {dataset_dir(dataset)}")
            self.reports[key] = experiment(setting_config(dataset, setting, **overrides))
        return self.reports[key]

    def means(self, dataset, setting, **overrides) -> dict[str, float]:
        """Mean accuracy in percent per policy family (``dcbrs`` for either clusterer)."""
        out = {}
        for agg in self.report(dataset, setting, **overrides).aggregates:
            out[agg.policy.split("-")[0]] = 100 * agg.mean
        return out


@pytest.fixture(scope="session")
def results():
    return Results()


def fmt(means: dict) -> str:
    return " ".join(f"{k}={v:.1f}" for k, v in means.items())


@pytest.mark.slow
def test_criterion_1_base_case_parity(results):
    checks = []
    detail = []
    for label, overrides in (("R=1", {}), (f"R={FAST_REFRESH}", {"refresh": FAST_REFRESH})):
        m = results.means("mnist", "base", **overrides)
        ok = (abs(m["dcbrs"] - m["cbrs"]) <= 5 and m["dcbrs"] - m["reservoir"] >= 8
              and m["cbrs"] - m["reservoir"] >= 8)
        checks.append(ok)
        detail.append(f"[{label}] {fmt(m)}")
    record(1, all(checks), "; ".join(detail))
    assert all(checks)


@pytest.mark.slow
def test_criterion_2_omniscient_gap(results):
    mn = results.means("mnist", "omniscient")
    fm = results.means("fashion-mnist", "omniscient")
    ok = mn["dcbrs"] - mn["cbrs"] >= 4 and fm["dcbrs"] > fm["cbrs"]
    record(2, ok, f"[mnist] {fmt(mn)}; [fashion-mnist] {fmt(fm)}")
    assert ok


@pytest.mark.slow
def test_criterion_3_realistic_case(results):
    ok, detail = True, []
    for setting in ("realistic-5", "realistic-3"):
        m = results.means("mnist", setting)
        paper = PAPER[(setting, "mnist")]
        beats = m["dcbrs"] > m["cbrs"]
        close = all(abs(m[p] - paper[p]) <= 6 for p in ("cbrs", "dcbrs"))
        ok &= beats and close
        detail.append(f"[{setting}] {fmt(m)} (paper cbrs={paper['cbrs']} dcbrs={paper['dcbrs']})")
    record(3, ok, "; ".join(detail))
    assert ok


@pytest.mark.slow
def test_criterion_4_ordering(results):
    # Expected order is the paper's order for that table cell; in the base case
    # CBRS and D-CBRS may come in either order ("approximately similar accuracy").
    failures, detail = [], []
    for dataset in ("mnist", "fashion-mnist"):
        for setting in SETTINGS:
            m = results.means(dataset, setting)
            paper = PAPER[(setting, dataset)]
            expected = sorted(paper, key=paper.get, reverse=True)
            observed = sorted(m, key=m.get, reverse=True)
            if setting == "base":
                ok = observed[-1] == expected[-1] == "reservoir"
            else:
                ok = observed == expected
            detail.append(f"{dataset}/{setting}:{'ok' if ok else 'x'}")
            if not ok:
                failures.append(f"{dataset}/{setting} {fmt(m)}")
    record(4, not failures, " ".join(detail) + ("" if not failures else " | " + "; ".join(failures)))
    assert not failures


def minority_counts(policy_kind, stream, seed, minority):
    p = make_policy(policy_kind, 500, seed)
    for inst in stream.instances():
        p.observe(inst)
    c = Counter((i.label, i.sub_label) for i in p.buffer.instances())
    return [c[(label, sub)] for label, sub in sorted(minority.items())]


def test_criterion_5_memory_composition():
    blobs = figure_fixture()
    minority = {b.label: i for i, b in enumerate(blobs) if i % 2 == 1}
    held = 0
    legs = Counter()
    for seed in range(50):
        data = make_synthetic(blobs, sub_rng(seed, "synthetic"))
        stream = build_stream(data, 10, sub_rng(seed, "shuffle"))
        d = minority_counts("dcbrs-oracle", stream, seed, minority)
        c = minority_counts("cbrs", stream, seed, minority)
        r = minority_counts("reservoir", stream, seed, minority)
        held += all(d[k] >= c[k] >= r[k] for k in range(len(d)))
        legs["dcbrs>=cbrs"] += all(d[k] >= c[k] for k in range(len(d)))
        legs["cbrs>=reservoir"] += all(c[k] >= r[k] for k in range(len(d)))
    ok = held >= 45
    record(5, ok, f"full chain in {held}/50 seeds (need 45); "
                  f"dcbrs>=cbrs {legs['dcbrs>=cbrs']}/50, cbrs>=reservoir {legs['cbrs>=reservoir']}/50")
    assert ok


def test_criterion_6_reservoir_uniformity():
    n, m, runs = 20_000, 500, 200
    hits = np.zeros(n)
    feature = np.zeros(1, dtype=np.float32)
    for seed in range(runs):
        p = ReservoirPolicy(m, seed)
        for i in range(n):
            p.observe(Instance(i, feature, 0))
        for inst in p.buffer.instances():
            hits[inst.id] += 1
    pvalue = stats.chisquare(hits).pvalue
    ok = pvalue > 0.01
    record(6, ok, f"chi-square p={pvalue:.3f} over {runs} streams of {n}")
    assert ok


def test_criterion_7_cbrs_preservation():
    feature = np.zeros(1, dtype=np.float32)
    violations = evictions = 0
    for seed in range(1000):
        rng = np.random.default_rng([7, seed])
        m = int(rng.integers(1, 51))
        n_classes = int(rng.integers(1, 8))
        length = int(rng.integers(1, 6 * m + 2))
        weights = rng.dirichlet(np.ones(n_classes))
        labels = rng.choice(n_classes, size=length, p=weights)
        if rng.random() < 0.5:
            labels = np.sort(labels)  # class-incremental variant
        p = CBRSPolicy(m, seed)
        log = []
        for i, y in enumerate(labels):
            event = p.observe(Instance(i, feature, int(y)))
            log.append((event, frozenset(p.buffer.full_classes)))
        # Full classes stay full, so a class absent from the final set was never full.
        never_full = set(range(n_classes)) - p.buffer.full_classes
        for event, full_at_event in log:
            if event.evicted is not None:
                evictions += 1
                label = event.evicted.label
                violations += label not in full_at_event or label in never_full
    ok = violations == 0
    record(7, ok, f"{violations} violations in {evictions} audited evictions over 1000 streams")
    assert ok


def _fd_relative_error(rng) -> float:
    while True:
        dim = int(rng.integers(1, 5))
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(0, 3))))
        classes = int(rng.integers(2, 5))
        sizes = [dim, *hidden, classes]
        n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        if n_params <= 100:
            break
    params = mlp_init(dim, classes, rng, hidden=hidden, dtype="float64")
    for b in params.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(int(rng.integers(1, 8)), dim))
    y = rng.integers(0, classes, size=len(x))
    _, analytic = loss_and_grads(params, x, y)
    h = 1e-6
    num, ana = [], []
    for arr, g in zip(params.arrays(), analytic):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            plus, _ = loss_and_grads(params, x, y)
            arr[idx] = old - h
            minus, _ = loss_and_grads(params, x, y)
            arr[idx] = old
            num.append((plus - minus) / (2 * h))
            ana.append(g[idx])
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-12))


def test_criterion_8_gradient_check():
    rng = np.random.default_rng(8)
    errors = [_fd_relative_error(rng) for _ in range(100)]
    ok = max(errors) < 1e-4
    record(8, ok, f"max relative error {max(errors):.2e} over 100 networks")
    assert ok


def _optimal_two_partition(points) -> float:
    n = len(points)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        a, b = points[side], points[~side]
        best = min(best, ((a - a.mean(0)) ** 2).sum() + ((b - b.mean(0)) ** 2).sum())
    return float(best)


def test_criterion_9_kmeans_optimality():
    hits = 0
    for trial in range(1000):
        r = np.random.default_rng([9, trial])
        points = r.random((int(r.integers(2, 9)), 2))
        fit = kmeans_fit(points, 2, np.random.default_rng([90, trial]))
        optimum = _optimal_two_partition(points)
        hits += fit.inertia <= optimum * (1 + 1e-9) + 1e-12
    ok = hits >= 950
    record(9, ok, f"optimal partition in {hits}/1000 trials (need 950)")
    assert ok


def _cli_report(tmp_path, name, spec) -> bytes:
    out = tmp_path / name
    subprocess.run([sys.executable, "-m", "dcbrs", "run", "--dataset", "synthetic",
                    "--synthetic-spec", str(spec), "--scenario", "realistic", "--merge-target", "3",
                    "--policy", "reservoir,cbrs,dcbrs-kmeans,dcbrs-oracle", "--runs", "3",
                    "--memory-size", "100", "--seed", "42", "--out", str(out)],
                   check=True, capture_output=True)
    return out.read_bytes()


def test_criterion_10_determinism(tmp_path):
    blobs = figure_fixture(sizes=(400, 300, 200, 100, 50))
    spec = tmp_path / "blobs.ini"
    spec.write_text(format_synthetic(blobs))
    same = _cli_report(tmp_path, "a.json", spec) == _cli_report(tmp_path, "b.json", spec)
    detail = ["synthetic via CLI in two processes: " + ("identical" if same else "DIFFERENT")]
    if have_dataset("mnist"):
        cfg = dict(dataset="mnist", data_dir=str(dataset_dir("mnist")), runs=1, seed=5,
                   policies=("reservoir", "cbrs", "dcbrs"), refresh=FAST_REFRESH)
        texts = [json.dumps(run_experiment(RunConfig(**cfg)).to_dict()) for _ in range(2)]
        same_mnist = texts[0] == texts[1]
        same &= same_mnist
        detail.append("mnist in-process twice: " + ("identical" if same_mnist else "DIFFERENT"))
    record(10, same, "; ".join(detail))
    assert same

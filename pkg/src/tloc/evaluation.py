"""Cross-validated evaluation of position-recovery methods per domain.

Each evaluated domain's labeled samples are shuffled with a per-repeat seed
and cut into folds.  Every method is trained on the other folds (plus, for
transfer methods, full source domains) and scored on the held-out fold.
Errors are pooled over folds into one report row per (domain, repeat); a
final aggregate row pools every test sample of the run.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from fractions import Fraction
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .distance import DistanceCalculator, DistanceConfig, select_sources
from .domain import Domain, geo_to_local_array, local_to_geo_array
from .fingerprint import FingerprintConfig, nbl, renbl, tran_renbl
from .forest import ForestConfig, RegressionForest, train_forest
from .stl import TargetCriteria, TransferConfig, fit_with_sources, identify_targets

log = logging.getLogger(__name__)

METHODS = ("non_transfer", "tloc", "ins_transfer", "nbl", "renbl", "tran_renbl", "stl_min", "stl_random")
REPORT_HEADER = ["method", "domain", "repeat", "fold", "median_m", "mean_m", "p90_m", "n", "runtime_ms"]
DUMP_HEADER = ["method", "domain", "repeat", "fold", "sample", "error_m"]


@dataclass(frozen=True)
class ErrorStats:
    median_m: float
    mean_m: float
    p90_m: float
    n: int

    def __post_init__(self):
        if self.n > 0 and not (0 <= self.median_m <= self.p90_m and self.mean_m >= 0):
            raise ValueError("inconsistent error statistics")


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    return float(v[(len(v) - 1) // 2])


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    # exact rational arithmetic keeps the rank stable at boundaries like q*n/100 = 9
    rank = max(1, math.ceil(Fraction(q) * len(v) / 100))
    return float(v[rank - 1])


def stats_of(errors) -> ErrorStats:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    return ErrorStats(lower_median(e), float(e.mean()), nearest_rank(e, 90), int(e.size))


def planar_errors(predictions, ground_truth) -> np.ndarray:
    """Per-sample Euclidean error in meters, projecting around each truth point."""
    pred = np.asarray(predictions, dtype=float).reshape(-1, 2)
    truth = np.asarray(ground_truth, dtype=float).reshape(-1, 2)
    if len(pred) != len(truth):
        raise ValueError("prediction and ground-truth lengths differ")
    out = np.empty(len(pred))
    for i in range(len(pred)):
        d = geo_to_local_array(tuple(truth[i]), pred[i])
        out[i] = math.hypot(d[0, 0], d[0, 1])
    return out


def error_stats(predictions, ground_truth) -> ErrorStats:
    e = planar_errors(predictions, ground_truth)
    if e.size == 0:
        raise ValueError("empty input")
    return stats_of(e)


def kfold_split(samples, folds: int, repeat_seed: int) -> list[np.ndarray]:
    """Seeded shuffle then near-equal partition of ``range(len(samples))``."""
    n = samples if isinstance(samples, (int, np.integer)) else len(samples)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise ValueError(f"{n} samples cannot fill {folds} folds")
    perm = np.random.default_rng(repeat_seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


@dataclass
class ExperimentPlan:
    method: str = "tloc"
    mr: Optional[str] = None
    stations: Optional[str] = None
    domains_dir: Optional[str] = None
    folds: int = 5
    repeats: int = 10
    seed: int = 0
    targets: str = "auto"  # "auto", "all", or comma-separated domain names
    tech: str = "2G"
    g: int = 20
    gap_threshold: float = 3600.0
    n_trees: int = 200
    max_features: Optional[int] = None
    k: int = 3
    cutoff: float = 0.95
    w_mr: float = 0.5
    p: float = 3.0
    weights: Optional[str] = None  # None -> softmax_bs for 2G, harmonic for 4G
    bs_method: str = "pairwise"
    min_node_targets: int = 1
    max_labeled: int = 50
    error_threshold: Optional[float] = None  # None -> 40 m (2G) / 30 m (4G)
    cell: float = 50.0
    mode: str = "mle"
    top_m: int = 5
    timing: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.tech not in ("2G", "4G"):
            raise ValueError("tech must be 2G or 4G")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def forest_config(self) -> ForestConfig:
        return ForestConfig(n_trees=self.n_trees, max_features=self.max_features, seed=self.seed)

    def distance_config(self) -> DistanceConfig:
        weights = self.weights or ("harmonic" if self.tech == "4G" else "softmax_bs")
        return DistanceConfig(p=self.p, weights=weights, bs_method=self.bs_method, w_mr=self.w_mr)

    def transfer_config(self) -> TransferConfig:
        return TransferConfig(k=self.k, cutoff=self.cutoff, min_node_targets=self.min_node_targets)

    def fingerprint_config(self) -> FingerprintConfig:
        return FingerprintConfig(cell_size=self.cell, mode=self.mode, top_m=self.top_m)

    def criteria(self) -> TargetCriteria:
        thr = self.error_threshold or (30.0 if self.tech == "4G" else 40.0)
        return TargetCriteria(thr, self.max_labeled)


@dataclass
class Report:
    rows: list[list] = field(default_factory=list)
    dump: list[list] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    targets: list[str] = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def dump_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DUMP_HEADER)
        w.writerows(self.dump)
        return buf.getvalue()

    def write(self, path, dump_path=None) -> None:
        Path(path).write_text(self.csv_text())
        if dump_path is not None:
            Path(dump_path).write_text(self.dump_text())


def _fmt(x: float) -> str:
    return f"{x:.6f}"


class Evaluator:
    """Per-fold predictions for every method over one domain corpus."""

    def __init__(self, domains: Sequence[Domain], plan: ExperimentPlan,
                 calc: Optional[DistanceCalculator] = None):
        self.domains = list(domains)
        self.plan = plan
        self.by_name = {d.name: d for d in self.domains}
        self.calc = calc or DistanceCalculator.fit(self.domains, plan.distance_config())
        self._source_forests: dict[tuple, RegressionForest] = {}
        self._baseline: Optional[dict[str, float]] = None

    # -- corpus-level helpers -------------------------------------------------

    def baseline_errors(self) -> dict[str, float]:
        """Cross-validated non-transfer median error of every domain (one repeat)."""
        if self._baseline is None:
            out = {}
            for d in self.domains:
                if d.n_labeled < self.plan.folds:
                    continue
                errs = []
                for train, test in self._folds(d, 0):
                    errs.extend(self._fold_errors("non_transfer", d, train, test, [], 0, 0))
                out[d.name] = lower_median(errs)
            self._baseline = out
        return self._baseline

    def resolve_targets(self) -> list[Domain]:
        t = self.plan.targets
        if t == "all":
            return [d for d in self.domains if d.n_labeled >= self.plan.folds]
        if t == "auto":
            return identify_targets(self.domains, self.baseline_errors(), self.plan.criteria())
        names = [s.strip() for s in t.split(",") if s.strip()]
        missing = [n for n in names if n not in self.by_name]
        if missing:
            raise KeyError(f"unknown target domains: {', '.join(missing)}")
        return [self.by_name[n] for n in names]

    def candidates_for(self, targets: Sequence[Domain]) -> list[Domain]:
        names = {d.name for d in targets}
        return [d for d in self.domains if d.name not in names and d.n_labeled > 0]

    def _folds(self, d: Domain, repeat: int):
        lab = d.labeled_index
        seed = (self.plan.seed * 1_000_003 + repeat) % (2**32)
        parts = kfold_split(len(lab), self.plan.folds, seed)
        for f in range(self.plan.folds):
            test = lab[parts[f]]
            train = lab[np.concatenate([parts[j] for j in range(self.plan.folds) if j != f])]
            yield np.sort(train), test

    def _source_forest(self, sources: Sequence[Domain]) -> RegressionForest:
        key = tuple(d.name for d in sources)
        forest = self._source_forests.get(key)
        if forest is None:
            from .stl import pool_sources

            X, Y, _ = pool_sources(sources)
            forest = train_forest(X, Y, self.plan.forest_config())
            self._source_forests[key] = forest
        return forest

    # -- source choice ----------------------------------------------------------

    def choose_sources(self, method: str, view: Domain, candidates: Sequence[Domain],
                       repeat: int, fold: int) -> list[Domain]:
        plan = self.plan
        if method in ("tloc", "ins_transfer", "tran_renbl"):
            return [d for d, _ in select_sources(view, candidates, plan.k, plan.cutoff, self.calc)]
        if method == "stl_min":
            err = self.baseline_errors()
            ranked = sorted((err[d.name], d.serving, d) for d in candidates if d.name in err)
            return [d for _, _, d in ranked[:plan.k]]
        if method == "stl_random":
            idx = self.domains.index(self.by_name[view.name])
            rng = np.random.default_rng([plan.seed, repeat, fold, idx])
            pick = rng.choice(len(candidates), size=min(plan.k, len(candidates)), replace=False)
            return [candidates[i] for i in sorted(pick)]
        return []

    # -- per-fold prediction ------------------------------------------------------

    def predict_fold(self, method: str, d: Domain, train, test, candidates: Sequence[Domain],
                     repeat: int = 0, fold: int = 0) -> np.ndarray:
        """Absolute (lon, lat) predictions for the samples ``test`` of domain ``d``."""
        plan = self.plan
        view = d.with_labels(train)
        Xq = d.features[test]
        if method == "nbl":
            held = {(d.name, int(i)) for i in test}
            pool = [s for dom in self.domains for i, s in enumerate(dom.samples)
                    if s.label is not None and (dom.name, i) not in held]
            model = nbl(pool, plan.fingerprint_config(), center=d.center)
            return model.locate([d.samples[i] for i in test])
        if method in ("renbl", "tran_renbl"):
            sources = self.choose_sources(method, view, candidates, repeat, fold)
            model = tran_renbl(d, sources, train, plan.fingerprint_config())
            return model.locate([d.samples[i] for i in test])
        if method == "non_transfer":
            X, Y = view.labeled_xy()
            rel = train_forest(X, Y, plan.forest_config()).predict(Xq)
        elif method == "ins_transfer":
            sources = self.choose_sources(method, view, candidates, repeat, fold)
            X, Y = view.labeled_xy()
            if sources:
                from .stl import pool_sources

                Xs, Ys, _ = pool_sources(sources)
                X, Y = np.vstack([X, Xs]), np.vstack([Y, Ys])
            rel = train_forest(X, Y, plan.forest_config()).predict(Xq)
        else:
            sources = self.choose_sources(method, view, candidates, repeat, fold)
            if not sources:
                X, Y = view.labeled_xy()
                rel = train_forest(X, Y, plan.forest_config()).predict(Xq)
            else:
                model = fit_with_sources(view, [(s, None) for s in sources], plan.transfer_config(),
                                         plan.forest_config(), source_forest=self._source_forest(sources))
                rel = model.predict(Xq)
        return local_to_geo_array(d.center, rel)

    def _fold_errors(self, method, d, train, test, candidates, repeat, fold) -> np.ndarray:
        pred = self.predict_fold(method, d, train, test, candidates, repeat, fold)
        truth = np.array([d.samples[i].label for i in test], dtype=float)
        return planar_errors(pred, truth)

    # -- experiment -----------------------------------------------------------------

    def run(self, method: Optional[str] = None, targets: Optional[Sequence[Domain]] = None) -> Report:
        method = method or self.plan.method
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        report = Report()
        targets = list(targets) if targets is not None else self.resolve_targets()
        report.targets = [d.name for d in targets]
        candidates = self.candidates_for(targets)
        pooled = []
        for d in targets:
            for r in range(self.plan.repeats):
                t0 = time.perf_counter()
                try:
                    errs = []
                    for f, (train, test) in enumerate(self._folds(d, r)):
                        e = self._fold_errors(method, d, train, test, candidates, r, f)
                        errs.append(e)
                        report.dump.extend([method, d.name, r, f, int(i), _fmt(v)] for i, v in zip(test, e))
                    e = np.concatenate(errs)
                except Exception as exc:  # isolate the domain, keep the run going
                    log.warning("%s failed on %s: %s", method, d.name, exc)
                    report.failures[d.name] = f"{type(exc).__name__}: {exc}"
                    report.rows.append([method, d.name, r, "all", "nan", "nan", "nan", 0, 0])
                    break
                st = stats_of(e)
                pooled.append(e)
                ms = int(round((time.perf_counter() - t0) * 1000)) if self.plan.timing else 0
                report.rows.append([method, d.name, r, "all", _fmt(st.median_m), _fmt(st.mean_m),
                                    _fmt(st.p90_m), st.n, ms])
        if pooled:
            st = stats_of(np.concatenate(pooled))
            report.rows.append([method, "*", "*", "*", _fmt(st.median_m), _fmt(st.mean_m),
                                _fmt(st.p90_m), st.n, 0])
        return report


def load_corpus(plan: ExperimentPlan) -> list[Domain]:
    from .domain import load_domains, partition_by_serving
    from .mr import parse_mr_csv, parse_station_csv

    if plan.domains_dir:
        return load_domains(plan.domains_dir)
    if not (plan.mr and plan.stations):
        raise ValueError("need either domains_dir or both mr and stations")
    samples = parse_mr_csv(plan.mr)
    registry = parse_station_csv(plan.stations)
    return partition_by_serving(samples, registry, plan.g, plan.gap_threshold)


def run_experiment(plan: ExperimentPlan, domains: Optional[Sequence[Domain]] = None) -> Report:
    domains = list(domains) if domains is not None else load_corpus(plan)
    return Evaluator(domains, plan).run()


def summarize(report_rows: Sequence[dict]) -> list[dict]:
    """Aggregate rows (domain ``*``) of one or more parsed reports."""
    return [r for r in report_rows if r["domain"] == "*"]

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tloc.distance import DistanceCalculator
from tloc.evaluation import (METHODS, REPORT_HEADER, ErrorStats, Evaluator, ExperimentPlan, error_stats,
                             kfold_split, lower_median, nearest_rank, planar_errors, stats_of)

values = st.lists(st.floats(0, 1e4), min_size=1, max_size=60)


@given(values)
def test_lower_median_oracle(v):
    s = sorted(v)
    assert lower_median(v) == s[(len(s) + 1) // 2 - 1]
    assert sum(x <= lower_median(v) for x in v) >= len(v) / 2


@given(values, st.floats(1, 100))
def test_nearest_rank_oracle(v, q):
    s = sorted(v)
    # smallest rank r with r / n >= q / 100
    r = next(r for r in range(1, len(s) + 1) if Fraction(r, len(s)) >= Fraction(q) / 100)
    assert nearest_rank(v, q) == s[r - 1]


@given(values)
def test_stats_are_ordered(v):
    st_ = stats_of(v)
    assert st_.median_m <= st_.p90_m and st_.n == len(v)
    assert abs(st_.mean_m - np.mean(v)) < 1e-6 * max(1.0, max(v))


def test_stats_validation():
    with pytest.raises(ValueError):
        stats_of([])
    with pytest.raises(ValueError):
        ErrorStats(5.0, 1.0, 4.0, 3)


@given(st.integers(5, 200), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_kfold_is_a_balanced_partition(n, k, seed):
    parts = kfold_split(n, k, seed)
    flat = np.sort(np.concatenate(parts))
    assert np.array_equal(flat, np.arange(n))
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1
    assert all(np.array_equal(a, b) for a, b in zip(parts, kfold_split(n, k, seed)))


def test_kfold_rejects_too_few_samples():
    with pytest.raises(ValueError):
        kfold_split(3, 5, 0)


def test_planar_errors():
    truth = np.array([[121.0, 31.0], [0.0, 0.0]])
    assert np.array_equal(planar_errors(truth, truth), [0.0, 0.0])
    moved = truth + [[0.0, 1e-3], [1e-3, 0.0]]
    e = planar_errors(moved, truth)
    assert e[0] == pytest.approx(110.54, rel=1e-9)
    assert e[1] == pytest.approx(111.32, rel=1e-9)
    assert error_stats(moved, truth).n == 2
    with pytest.raises(ValueError):
        planar_errors(truth, truth[:1])


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(method="magic")
    with pytest.raises(ValueError):
        ExperimentPlan(folds=1)
    assert ExperimentPlan(tech="4G").distance_config().weights == "harmonic"
    assert ExperimentPlan(tech="4G").criteria().median_error_threshold == 30.0


@pytest.fixture(scope="module")
def evaluator(twin):
    sc, domains = twin
    plan = ExperimentPlan(n_trees=4, repeats=2, seed=1, targets=",".join(map(str, sc.targets)))
    calc = DistanceCalculator.fit(domains, plan.distance_config(), pos_pairs=60)
    return Evaluator(domains, plan, calc)


@pytest.mark.parametrize("method", METHODS)
def test_every_method_reports(evaluator, method):
    rep = evaluator.run(method)
    n_t = len(rep.targets)
    assert not rep.failures
    assert len(rep.rows) == n_t * evaluator.plan.repeats + 1
    assert rep.csv_text().splitlines()[0] == ",".join(REPORT_HEADER)
    agg = rep.rows[-1]
    errs = [float(r[5]) for r in rep.dump]
    assert agg[1] == "*" and agg[7] == len(errs)
    assert float(agg[4]) == pytest.approx(lower_median(errs), abs=1e-6)
    assert all(r[8] == 0 for r in rep.rows)


def test_runs_are_reproducible(evaluator):
    a = evaluator.run("tloc").csv_text()
    b = evaluator.run("tloc").csv_text()
    assert a == b


def test_failing_domain_is_isolated(twin):
    sc, domains = twin
    poor = next(d for d in domains if d.n_labeled >= 5 and d.serving not in sc.targets)
    thin = poor.with_labels(poor.labeled_index[:3])
    corpus = [thin if d is poor else d for d in domains]
    plan = ExperimentPlan(method="non_transfer", n_trees=2, repeats=1,
                          targets=",".join([thin.name] + [str(t) for t in sc.targets]))
    rep = Evaluator(corpus, plan).run()
    assert set(rep.failures) == {thin.name}
    assert [r for r in rep.rows if r[1] == thin.name][0][7] == 0
    assert rep.rows[-1][7] == 40 * len(sc.targets)


def test_auto_targets_use_baseline_errors(evaluator):
    auto = Evaluator(evaluator.domains, ExperimentPlan(n_trees=2, repeats=1), evaluator.calc)
    picked = auto.resolve_targets()
    base = auto.baseline_errors()
    for d in picked:
        assert base[d.name] > 40.0 and d.n_labeled <= 50
    with pytest.raises(KeyError):
        Evaluator(evaluator.domains, ExperimentPlan(targets="nope"), evaluator.calc).resolve_targets()

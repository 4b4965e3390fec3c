"""Structure transfer of a source-trained forest to a label-scarce domain.

A forest grown on pooled source-domain samples keeps its topology and split
features; only thresholds are re-chosen with target samples, top-down.  At
each node the candidates are midpoints between consecutive distinct target
values of the node feature.  Only candidates whose target variance reduction
is a local maximum among adjacent candidates are admissible, and among those
the one whose target child label distributions are closest (in
Jensen-Shannon terms) to the source child distributions wins.  Leaves reached
by target samples take the mean of those samples' labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .distance import DEFAULT_CUTOFF, DEFAULT_K, DistanceCalculator, DomainDistance, select_sources
from .domain import Domain, local_to_geo_array
from .forest import ForestConfig, RegressionForest, Tree, train_forest

log = logging.getLogger(__name__)


@dataclass
class TransferConfig:
    k: int = DEFAULT_K
    cutoff: float = DEFAULT_CUTOFF
    label_grid: Optional[int] = None  # None -> the target domain's g
    label_extent: Optional[tuple[float, float]] = None  # half extents of the label frame
    min_node_targets: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.label_grid is not None and self.label_grid < 2:
            raise ValueError("label_grid must be >= 2")
        if self.min_node_targets < 1:
            raise ValueError("min_node_targets must be >= 1")


@dataclass
class TargetCriteria:
    median_error_threshold: float = 40.0  # 30 for 4G data
    max_labeled: int = 50

    def __post_init__(self):
        if self.median_error_threshold <= 0 or self.max_labeled <= 0:
            raise ValueError("thresholds must be positive")


def identify_targets(domains: Sequence[Domain], per_domain_median_error: dict[str, float],
                     criteria: Optional[TargetCriteria] = None) -> list[Domain]:
    """Domains that are both inaccurate and label-scarce."""
    criteria = criteria or TargetCriteria()
    out = []
    for d in domains:
        err = per_domain_median_error.get(d.name)
        if err is None:
            continue
        if err > criteria.median_error_threshold and d.n_labeled <= criteria.max_labeled:
            out.append(d)
    return out


def pool_sources(source_domains: Sequence[Domain]) -> tuple[np.ndarray, np.ndarray, list[tuple[str, int]]]:
    """Union of labeled (features, relative label) pairs, deduplicated by origin."""
    seen = set()
    xs, ys, keys = [], [], []
    for d in source_domains:
        if d.name in seen:
            continue
        seen.add(d.name)
        X, Y = d.labeled_xy()
        xs.append(X)
        ys.append(Y)
        keys.extend((d.name, int(i)) for i in d.labeled_index)
    if not keys:
        raise ValueError("empty source pool")
    return np.vstack(xs), np.vstack(ys), keys


def label_frame(target: Domain, config: TransferConfig) -> tuple[int, tuple[float, float]]:
    g = config.label_grid or target.g
    if config.label_extent is not None:
        return g, config.label_extent
    if target.bbox_half_extents is not None:
        return g, target.bbox_half_extents
    r = target.radius_m or 1.0
    return g, (r, r)


def stl_adapt(forest: RegressionForest, target_X, target_Y, config: Optional[TransferConfig] = None,
              label_grid: int = 20, label_extent: Optional[tuple[float, float]] = None) -> RegressionForest:
    """Adapt every tree of ``forest`` to the target samples ``(target_X, target_Y)``.

    ``label_grid``/``label_extent`` fix the square lattice (over
    [-hx, hx] x [-hy, hy]) on which labels are discretized for the divergence
    term; ``config.label_grid``/``config.label_extent`` take precedence.
    """
    config = config or TransferConfig()
    Xt = np.ascontiguousarray(np.asarray(target_X, dtype=np.float64).reshape(-1, forest.n_features))
    Yt = np.ascontiguousarray(np.asarray(target_Y, dtype=np.float64).reshape(-1, 2))
    if len(Xt) != len(Yt):
        raise ValueError("target X and Y row counts differ")
    if len(Xt) == 0:
        return replace(forest, trees=[replace(t) for t in forest.trees])
    if forest.X_train is None or forest.Y_train is None:
        raise ValueError("forest carries no training data; cannot recover source distributions")
    g = config.label_grid or label_grid
    extent = config.label_extent or label_extent
    if extent is None:
        span = np.abs(np.vstack([Yt, forest.Y_train])).max(axis=0)
        extent = (max(span[0], 1.0), max(span[1], 1.0))
    hx, hy = extent
    ox, oy = -hx, -hy
    cw, ch = 2.0 * hx / g, 2.0 * hy / g
    src_cells = _kernels.label_cells(forest.Y_train, ox, oy, cw, ch, g)
    tgt_cells = _kernels.label_cells(Yt, ox, oy, cw, ch, g)
    trees = []
    for t in forest.trees:
        if t.sample_index is None:
            raise ValueError("tree lacks its bootstrap sample index")
        thr, val, cnt = _kernels.adapt_tree(
            t.feature, t.threshold, t.left, t.right, t.value, t.count,
            forest.X_train, src_cells, t.sample_index, Xt, Yt, tgt_cells, g * g,
            config.min_node_targets)
        trees.append(Tree(t.feature, thr, t.left, t.right, val, cnt, sample_index=t.sample_index))
    return RegressionForest(trees=trees, config=forest.config, n_features=forest.n_features,
                            X_train=forest.X_train, Y_train=forest.Y_train)


def instance_transfer(target_X, target_Y, source_X=None, source_Y=None,
                      forest_config: Optional[ForestConfig] = None) -> RegressionForest:
    """Plain forest on target samples concatenated with the source pool."""
    X = np.asarray(target_X, dtype=float)
    Y = np.asarray(target_Y, dtype=float).reshape(-1, 2)
    if source_X is not None and len(source_X):
        X = np.vstack([X, np.asarray(source_X, dtype=float)])
        Y = np.vstack([Y, np.asarray(source_Y, dtype=float).reshape(-1, 2)])
    return train_forest(X, Y, forest_config)


@dataclass
class TransferModel:
    forest: RegressionForest
    sources: list[tuple[Domain, Optional[DomainDistance]]] = field(default_factory=list)
    fallback: bool = False

    def predict(self, X) -> np.ndarray:
        return self.forest.predict(X)


def fit_non_transfer(target: Domain, forest_config: Optional[ForestConfig] = None) -> TransferModel:
    X, Y = target.labeled_xy()
    return TransferModel(train_forest(X, Y, forest_config), [], fallback=True)


def fit_with_sources(target: Domain, sources: Sequence[tuple[Domain, Optional[DomainDistance]]],
                     config: Optional[TransferConfig] = None,
                     forest_config: Optional[ForestConfig] = None,
                     source_forest: Optional[RegressionForest] = None) -> TransferModel:
    """Pool the sources, grow a forest on them, adapt it to the target labels.

    A forest already grown on exactly this source pool may be passed as
    ``source_forest`` to skip retraining; it is not modified.
    """
    config = config or TransferConfig()
    if not sources:
        return fit_non_transfer(target, forest_config)
    if source_forest is None:
        Xs, Ys, _ = pool_sources([d for d, _ in sources])
        source_forest = train_forest(Xs, Ys, forest_config)
    forest = source_forest
    Xt, Yt = target.labeled_xy()
    g, extent = label_frame(target, config)
    adapted = stl_adapt(forest, Xt, Yt, config, label_grid=g, label_extent=extent)
    return TransferModel(adapted, list(sources), fallback=False)


def fit_tloc(target: Domain, candidates: Sequence[Domain], calc: Optional[DistanceCalculator] = None,
             config: Optional[TransferConfig] = None,
             forest_config: Optional[ForestConfig] = None,
             selector: Optional[Callable] = None) -> TransferModel:
    """Select up to k similar sources under the cutoff, then transfer.

    ``selector(target, candidates, k)`` may replace distance-based selection
    (used by the random / min-error ablations).  Without any surviving source
    the non-transfer model is returned.
    """
    config = config or TransferConfig()
    candidates = [d for d in candidates if d.serving != target.serving and d.n_labeled > 0]
    if selector is None:
        chosen = select_sources(target, candidates, config.k, config.cutoff, calc)
    else:
        chosen = [(d, None) for d in selector(target, candidates, config.k)]
    if not chosen:
        log.debug("no source under cutoff for %s; falling back to non-transfer", target.name)
        return fit_non_transfer(target, forest_config)
    return fit_with_sources(target, chosen, config, forest_config)


@dataclass
class Localization:
    target: str
    predictions: np.ndarray  # (n, 2) lon/lat for every target sample
    relative: np.ndarray
    sources: list[str]
    fallback: bool


def tloc_localize(target: Domain, all_domains: Sequence[Domain],
                  calc: Optional[DistanceCalculator] = None,
                  config: Optional[TransferConfig] = None,
                  forest_config: Optional[ForestConfig] = None) -> Localization:
    """End to end: sources -> pooled forest -> adaptation -> absolute predictions."""
    if target.n_labeled == 0:
        raise ValueError(f"target {target.name} has no labeled samples")
    model = fit_tloc(target, all_domains, calc, config, forest_config)
    rel = model.predict(target.features)
    return Localization(target.name, local_to_geo_array(target.center, rel), rel,
                        [d.name for d, _ in model.sources], model.fallback)

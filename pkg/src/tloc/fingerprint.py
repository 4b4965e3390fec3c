"""Gaussian grid fingerprinting (NBL style) and its relative-space variants.

The labeled area is cut into square cells.  Each surviving cell stores, per
observed station key, the mean and standard deviation of RSSI.  A query is
scored by the summed Gaussian log-density of its RSSI values over the
stations it shares with a cell; stations unknown to a cell are skipped.

Station keys are BaseStationIds for plain NBL and GridIds for the relative
variants, so that samples pooled from several domains share keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

from .domain import Domain, geo_to_local_array, local_to_geo_array
from .mr import MRSample

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Unlocatable(ValueError):
    """The query shares no station with any fingerprint cell."""


@dataclass
class FingerprintConfig:
    cell_size: float = 50.0
    std_floor: float = 1.0
    min_cell_samples: int = 3
    mode: str = "mle"  # or "wa"
    top_m: int = 5

    def __post_init__(self):
        if self.cell_size <= 0 or self.std_floor <= 0:
            raise ValueError("cell_size and std_floor must be positive")
        if self.min_cell_samples < 1 or self.top_m < 1:
            raise ValueError("min_cell_samples and top_m must be >= 1")
        if self.mode not in ("mle", "wa"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class FingerprintGrid:
    cell_size: float
    cells: np.ndarray  # (n, 2) integer cell coordinates, lexicographically sorted
    centers: np.ndarray  # (n, 2)
    keys: list
    mean: np.ndarray  # (n, n_keys), nan where the cell never saw the key
    std: np.ndarray
    count: np.ndarray  # (n, n_keys) observations per (cell, key)
    n_samples: np.ndarray  # (n,) samples per cell

    def __post_init__(self):
        self.key_index = {k: j for j, k in enumerate(self.keys)}

    @property
    def n_cells(self) -> int:
        return len(self.cells)


Observation = dict  # station key -> rssi


def build_fingerprint(positions, observations: Sequence[Observation], cell_size: float = 50.0,
                      std_floor: float = 1.0, min_cell_samples: int = 3) -> FingerprintGrid:
    """Per-cell, per-key Gaussian RSSI statistics from labeled observations.

    ``positions`` are planar (x, y) meters.  Standard deviations are the
    population value floored at ``std_floor``; cells with fewer than
    ``min_cell_samples`` samples are dropped.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) == 0:
        raise ValueError("no labeled samples")
    if len(pos) != len(observations):
        raise ValueError("positions and observations differ in length")
    cell_of = np.floor(pos / cell_size).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (cx, cy) in enumerate(cell_of):
        buckets.setdefault((int(cx), int(cy)), []).append(i)
    kept = sorted(c for c, members in buckets.items() if len(members) >= min_cell_samples)
    if not kept:
        raise ValueError(f"no cell has >= {min_cell_samples} samples")
    keys = sorted({k for c in kept for i in buckets[c] for k in observations[i]}, key=_key_order)
    kidx = {k: j for j, k in enumerate(keys)}
    n, m = len(kept), len(keys)
    s1 = np.zeros((n, m))
    s2 = np.zeros((n, m))
    cnt = np.zeros((n, m), dtype=np.int64)
    n_samples = np.zeros(n, dtype=np.int64)
    for r, c in enumerate(kept):
        # two-pass per cell: means first, then squared deviations
        members = buckets[c]
        n_samples[r] = len(members)
        for i in members:
            for k, v in observations[i].items():
                j = kidx[k]
                s1[r, j] += v
                cnt[r, j] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = s1[r] / cnt[r]
        for i in members:
            for k, v in observations[i].items():
                j = kidx[k]
                s2[r, j] += (v - mu[j]) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, s1 / cnt, np.nan)
        var = np.where(cnt > 0, s2 / cnt, np.nan)
    std = np.where(cnt > 0, np.maximum(np.sqrt(var), std_floor), np.nan)
    cells = np.array(kept, dtype=np.int64).reshape(-1, 2)
    centers = (cells + 0.5) * cell_size
    return FingerprintGrid(cell_size, cells, centers, keys, mean, std, cnt, n_samples)


def _key_order(k):
    # keys of mixed types (station ids, grid ids) still sort deterministically
    if isinstance(k, tuple):
        return (type(k).__name__, tuple(k))
    if hasattr(k, "rnc_id"):
        return (type(k).__name__, (k.rnc_id, k.cell_id))
    return (type(k).__name__, (k,))


def log_likelihoods(grid: FingerprintGrid, obs: Observation) -> np.ndarray:
    """Per-cell log-likelihood; ``-inf`` where the cell shares no key."""
    cols = [(grid.key_index[k], v) for k, v in obs.items() if k in grid.key_index]
    ll = np.zeros(grid.n_cells)
    matched = np.zeros(grid.n_cells, dtype=bool)
    for j, v in cols:
        mu = grid.mean[:, j]
        sd = grid.std[:, j]
        ok = ~np.isnan(mu)
        z = (v - mu[ok]) / sd[ok]
        ll[ok] += -0.5 * z * z - np.log(sd[ok]) - LOG_SQRT_2PI
        matched |= ok
    ll[~matched] = -np.inf
    return ll


def predict_mle(grid: FingerprintGrid, obs: Observation) -> np.ndarray:
    ll = log_likelihoods(grid, obs)
    if not np.isfinite(ll).any():
        raise Unlocatable("query shares no station with the fingerprint")
    return grid.centers[int(np.argmax(ll))].copy()  # first maximum = smallest index


def predict_wa(grid: FingerprintGrid, obs: Observation, top_m: int = 5) -> np.ndarray:
    """Likelihood-weighted mean of the ``top_m`` most likely cell centers."""
    ll = log_likelihoods(grid, obs)
    finite = np.isfinite(ll)
    if not finite.any():
        raise Unlocatable("query shares no station with the fingerprint")
    order = np.argsort(-ll, kind="stable")[:min(top_m, int(finite.sum()))]
    w = np.exp(ll[order] - ll[order[0]])
    w /= w.sum()
    return w @ grid.centers[order]


def predict_position(grid: FingerprintGrid, obs: Observation, mode: str = "mle",
                     top_m: int = 5) -> np.ndarray:
    if mode == "mle":
        return predict_mle(grid, obs)
    if mode == "wa":
        return predict_wa(grid, obs, top_m)
    raise ValueError(f"unknown mode {mode!r}")


# -- observation keys -----------------------------------------------------------

def station_observation(sample: MRSample) -> Observation:
    """RSSI keyed by BaseStationId; entries without an id are skipped."""
    obs = {}
    for e in sample.entries:
        if e.station is not None and e.station not in obs:
            obs[e.station] = e.rssi
    return obs


def grid_observation(domain: Domain, sample: MRSample) -> Observation:
    """RSSI keyed by the station's GridId inside ``domain``."""
    obs = {}
    for e in sample.entries:
        gid = domain.station_grid.get(e.station) if e.station is not None else None
        if gid is not None and gid not in obs:
            obs[gid] = e.rssi
    return obs


# -- baselines ------------------------------------------------------------------

@dataclass
class FingerprintModel:
    grid: FingerprintGrid
    config: FingerprintConfig
    center: tuple[float, float]  # frame origin, lon/lat
    observe: Callable[[MRSample], Observation]
    fallback: np.ndarray  # planar position returned for unlocatable queries

    def locate_local(self, samples: Sequence[MRSample]) -> tuple[np.ndarray, np.ndarray]:
        """Planar predictions plus a flag for queries that fell back."""
        out = np.empty((len(samples), 2))
        missed = np.zeros(len(samples), dtype=bool)
        for i, s in enumerate(samples):
            try:
                out[i] = predict_position(self.grid, self.observe(s), self.config.mode,
                                          self.config.top_m)
            except Unlocatable:
                out[i] = self.fallback
                missed[i] = True
        return out, missed

    def locate(self, samples: Sequence[MRSample]) -> np.ndarray:
        return local_to_geo_array(self.center, self.locate_local(samples)[0])


def _model(positions, observations, config: FingerprintConfig, center, observe) -> FingerprintModel:
    grid = build_fingerprint(positions, observations, config.cell_size, config.std_floor,
                             config.min_cell_samples)
    weights = grid.n_samples / grid.n_samples.sum()
    return FingerprintModel(grid, config, center, observe, weights @ grid.centers)


def nbl(samples: Sequence[MRSample], config: Optional[FingerprintConfig] = None,
        center: Optional[tuple[float, float]] = None) -> FingerprintModel:
    """Plain NBL over absolute positions keyed by station id.

    Positions are projected around ``center`` (default: mean label).
    """
    config = config or FingerprintConfig()
    labeled = [s for s in samples if s.label is not None]
    if not labeled:
        raise ValueError("no labeled samples")
    lonlat = np.array([s.label for s in labeled], dtype=float)
    if center is None:
        center = tuple(lonlat.mean(axis=0))
    pos = geo_to_local_array(center, lonlat)
    return _model(pos, [station_observation(s) for s in labeled], config, center,
                  station_observation)


def _relative_training(domain: Domain, index) -> tuple[list, list]:
    index = domain.labeled_index if index is None else index
    pos = [domain.labels[i] for i in index]
    obs = [grid_observation(domain, domain.samples[i]) for i in index]
    return pos, obs


def renbl(domain: Domain, train_index=None, config: Optional[FingerprintConfig] = None) -> FingerprintModel:
    """NBL inside one domain's relative frame, keyed by GridId."""
    return tran_renbl(domain, [], train_index, config)


def tran_renbl(domain: Domain, sources: Sequence[Domain], train_index=None,
               config: Optional[FingerprintConfig] = None) -> FingerprintModel:
    """reNBL trained on the target's samples mixed with all source samples."""
    config = config or FingerprintConfig()
    pos, obs = _relative_training(domain, train_index)
    for src in sources:
        p, o = _relative_training(src, None)
        pos += p
        obs += o
    if not pos:
        raise ValueError("no labeled samples")
    return _model(np.array(pos, dtype=float).reshape(-1, 2), obs, config, domain.center,
                  lambda s: grid_observation(domain, s))

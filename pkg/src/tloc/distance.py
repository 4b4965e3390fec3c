"""Similarity between serving-station domains.

The composite distance mixes a signal part and a position part:

* signal part: per neighbor slot, p-norm distance between normalized RSSI
  (and SignalLevel) histograms, weighted per slot and fused with the
  RSSI/SignalLevel Pearson coefficient ``c`` as
  ``(d_rssi + c * d_sig) / (1 + c)``;
* position part: mean discrete Frechet distance over all trajectory pairs,
  scaled by a corpus-wide maximum so that it lies in [0, 1].

``dist = w_mr * dis_mr + w_pos * dis_pos``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit

from .domain import Domain
from .mr import MAX_ENTRIES

RSSI_EDGES = np.arange(-113.0, -42.0, 5.0)  # 14 bins of 5 dBm
SIG_EDGES = np.arange(-0.5, 5.0, 1.0)  # one bin per level 0..4
SIGNAL_KINDS = ("rssi", "signal_level")
HARMONIC = np.array([1.0 / i for i in range(1, MAX_ENTRIES + 1)])
HARMONIC /= HARMONIC.sum()


@dataclass(frozen=True)
class SignalHistogram:
    signal_kind: str
    group_index: int
    bin_edges: np.ndarray
    mass: np.ndarray
    n: int

    @property
    def empty(self) -> bool:
        return self.n == 0


@dataclass(frozen=True)
class GroupWeights:
    w: np.ndarray

    def __post_init__(self):
        if len(self.w) != MAX_ENTRIES or np.any(self.w < 0):
            raise ValueError("need 7 non-negative weights")


@dataclass(frozen=True)
class DomainDistance:
    a: str
    b: str
    dis_mr_rssi: float
    dis_mr_sig: float
    dis_mr: float
    dis_pos: float
    dist: float
    c: float
    w_mr: float
    w_pos: float
    pos_absent: bool = False


# -- histograms ---------------------------------------------------------------

def _slot_values(domain: Domain, group_index: int, kind: str) -> np.ndarray:
    k = group_index - 1
    if kind == "rssi":
        vals = [s.entries[k].rssi for s in domain.samples if len(s.entries) > k]
    elif kind == "signal_level":
        vals = [s.entries[k].signal_level for s in domain.samples if len(s.entries) > k]
    else:
        raise ValueError(f"unknown signal kind {kind!r}")
    return np.asarray(vals, dtype=float)


def histogram_of(values, bin_edges, kind: str = "rssi", group_index: int = 1) -> SignalHistogram:
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be strictly ascending with >= 2 entries")
    values = np.asarray(values, dtype=float)
    r = len(edges) - 1
    if values.size == 0:
        return SignalHistogram(kind, group_index, edges, np.zeros(r), 0)
    bins = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, r - 1)
    counts = np.bincount(bins, minlength=r).astype(float)
    return SignalHistogram(kind, group_index, edges, counts / values.size, int(values.size))


def build_histogram(domain: Domain, group_index: int, signal_kind: str = "rssi",
                    bin_edges=None) -> SignalHistogram:
    """Normalized histogram of one signal type over slot ``group_index`` (1..7)."""
    if bin_edges is None:
        bin_edges = RSSI_EDGES if signal_kind == "rssi" else SIG_EDGES
    return histogram_of(_slot_values(domain, group_index, signal_kind), bin_edges,
                        signal_kind, group_index)


def hist_distance(ha: SignalHistogram, hb: SignalHistogram, p: float = 3.0) -> float:
    """p-norm distance of bin masses; an empty side scores the maximum 2**(1/p)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if len(ha.bin_edges) != len(hb.bin_edges) or not np.array_equal(ha.bin_edges, hb.bin_edges):
        raise ValueError("histograms use different binning")
    if ha.empty or hb.empty:
        if ha.empty and hb.empty:
            return 0.0
        return 2.0 ** (1.0 / p)
    return float(np.sum(np.abs(ha.mass - hb.mass) ** p) ** (1.0 / p))


# -- station-group geometry ----------------------------------------------------

def station_set_distance(pos_a: np.ndarray, pos_b: np.ndarray, method: str = "pairwise") -> float:
    """Centroid distance, or mean of all cross pairwise distances."""
    pos_a = np.asarray(pos_a, dtype=float).reshape(-1, 2)
    pos_b = np.asarray(pos_b, dtype=float).reshape(-1, 2)
    if len(pos_a) == 0 or len(pos_b) == 0:
        raise ValueError("empty station group")
    if method == "centroid":
        return float(np.hypot(*(pos_a.mean(axis=0) - pos_b.mean(axis=0))))
    if method == "pairwise":
        diff = pos_a[:, None, :] - pos_b[None, :, :]
        return float(np.mean(np.hypot(diff[..., 0], diff[..., 1])))
    raise ValueError(f"unknown method {method!r}")


def group_positions(domain: Domain, group_index: int) -> np.ndarray:
    """Grid-cell centers of a slot's stations, rescaled to the unit square."""
    if not domain.has_grid:
        return np.empty((0, 2))
    g = domain.g
    cells = [domain.station_grid[sid] for sid in domain.neighbor_groups[group_index - 1]
             if sid in domain.station_grid]
    return (np.array(cells, dtype=float).reshape(-1, 2) + 0.5) / g


def group_bs_distance(domain_a: Domain, domain_b: Domain, i: int,
                      method: str = "pairwise") -> Optional[float]:
    """Station-group distance for slot ``i``; None when either group is absent."""
    pa = group_positions(domain_a, i)
    pb = group_positions(domain_b, i)
    if len(pa) == 0 or len(pb) == 0:
        return None
    return station_set_distance(pa, pb, method)


def softmax_weights(dis_bs: Sequence[Optional[float]]) -> GroupWeights:
    d = np.array([0.0 if v is None else v for v in dis_bs], dtype=float)
    e = np.exp(d - d.max())
    return GroupWeights(e / e.sum())


def harmonic_weights() -> GroupWeights:
    return GroupWeights(HARMONIC.copy())


def group_weights(domain_a: Domain, domain_b: Domain, method: str = "softmax_bs",
                  bs_method: str = "pairwise") -> GroupWeights:
    if method == "harmonic":
        return harmonic_weights()
    if method != "softmax_bs":
        raise ValueError(f"unknown weighting {method!r}")
    return softmax_weights([group_bs_distance(domain_a, domain_b, i, bs_method)
                            for i in range(1, MAX_ENTRIES + 1)])


# -- Pearson coefficient ---------------------------------------------------------

def _domain_pairs(domain: Domain) -> tuple[np.ndarray, np.ndarray]:
    rssi = [e.rssi for s in domain.samples for e in s.entries]
    sig = [e.signal_level for s in domain.samples for e in s.entries]
    return np.asarray(rssi, dtype=float), np.asarray(sig, dtype=float)


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    if len(x) < 2:
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(np.dot(xc, yc) / math.sqrt(sxx * syy))


def pearson_c(domains: Iterable[Domain]) -> float:
    """Average over domains of the per-domain RSSI/SignalLevel correlation."""
    vals = [r for r in (_pearson(*_domain_pairs(d)) for d in domains) if r is not None]
    if not vals:
        raise ValueError("no domain has varying RSSI and SignalLevel; pass c explicitly")
    return float(np.clip(np.mean(vals), -1.0, 1.0))


# -- trajectories ---------------------------------------------------------------

@njit(cache=True)
def _frechet(P, Q):
    p = P.shape[0]
    q = Q.shape[0]
    ca = np.empty(q)
    prev = np.empty(q)
    for i in range(p):
        for j in range(q):
            dx = P[i, 0] - Q[j, 0]
            dy = P[i, 1] - Q[j, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if i == 0 and j == 0:
                ca[j] = d
            elif i == 0:
                ca[j] = max(ca[j - 1], d)
            elif j == 0:
                ca[j] = max(prev[j], d)
            else:
                ca[j] = max(min(prev[j], ca[j - 1], prev[j - 1]), d)
        for j in range(q):
            prev[j] = ca[j]
    return prev[q - 1]


def discrete_frechet(T, T2) -> float:
    """Discrete Frechet distance between two point sequences (Euclidean ground)."""
    P = np.ascontiguousarray(getattr(T, "points", T), dtype=np.float64).reshape(-1, 2)
    Q = np.ascontiguousarray(getattr(T2, "points", T2), dtype=np.float64).reshape(-1, 2)
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("trajectories must be non-empty")
    return float(_frechet(P, Q))


@njit(cache=True)
def _mean_frechet(A, offa, B, offb):
    total = 0.0
    for i in range(offa.shape[0] - 1):
        P = A[offa[i]:offa[i + 1]]
        for j in range(offb.shape[0] - 1):
            total += _frechet(P, B[offb[j]:offb[j + 1]])
    return total / ((offa.shape[0] - 1) * (offb.shape[0] - 1))


def _pack(trajs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    pts = [np.asarray(getattr(t, "points", t), dtype=np.float64).reshape(-1, 2) for t in trajs]
    if any(len(p) == 0 for p in pts):
        raise ValueError("trajectories must be non-empty")
    off = np.zeros(len(pts) + 1, dtype=np.int64)
    off[1:] = np.cumsum([len(p) for p in pts])
    return np.ascontiguousarray(np.vstack(pts)), off


def raw_position_distance(trajs_a: Sequence, trajs_b: Sequence) -> Optional[float]:
    """Mean Frechet distance over all trajectory pairs; None if a side has none."""
    if not trajs_a or not trajs_b:
        return None
    return _packed_distance(_pack(trajs_a), _pack(trajs_b))


def _packed_distance(pa, pb) -> float:
    return float(_mean_frechet(pa[0], pa[1], pb[0], pb[1]))


# -- profiles and composite distance ----------------------------------------------

class DomainProfile:
    """Per-domain quantities reused across many pairwise comparisons."""

    def __init__(self, domain: Domain, max_traj_points: Optional[int] = None):
        self.name = domain.name
        self.serving = domain.serving
        self.rssi = [build_histogram(domain, i, "rssi") for i in range(1, MAX_ENTRIES + 1)]
        self.sig = [build_histogram(domain, i, "signal_level") for i in range(1, MAX_ENTRIES + 1)]
        self.groups = [group_positions(domain, i) for i in range(1, MAX_ENTRIES + 1)]
        trajs = []
        for t in domain.trajectories:
            pts = np.asarray(t.points, dtype=np.float64).reshape(-1, 2)
            if max_traj_points and len(pts) > max_traj_points:
                keep = np.unique(np.linspace(0, len(pts) - 1, max_traj_points).round().astype(int))
                pts = pts[keep]
            trajs.append(np.ascontiguousarray(pts))
        self.trajectories = trajs
        self.packed = _pack(trajs) if trajs else None

    @property
    def order_key(self) -> tuple:
        """Total order used to evaluate pairs canonically, even under name clashes."""
        key = getattr(self, "_order_key", None)
        if key is None:
            parts = [h.mass.tobytes() for h in self.rssi + self.sig]
            parts += [g.tobytes() for g in self.groups]
            if self.packed is not None:
                parts += [self.packed[0].tobytes(), self.packed[1].tobytes()]
            key = self._order_key = (self.serving, self.name, b"|".join(parts))
        return key

    def signature(self) -> np.ndarray:
        """Harmonic-weighted concatenation of the seven RSSI histograms."""
        return np.concatenate([w * h.mass for w, h in zip(HARMONIC, self.rssi)])


def _same_trajectories(ta: Sequence[np.ndarray], tb: Sequence[np.ndarray]) -> bool:
    return len(ta) == len(tb) and all(np.array_equal(x, y) for x, y in zip(ta, tb))


def _weighted_hist_sum(ha: Sequence[SignalHistogram], hb: Sequence[SignalHistogram],
                       w: np.ndarray, p: float) -> float:
    # slots empty on both sides carry no information: drop and renormalize
    live = [i for i in range(MAX_ENTRIES) if not (ha[i].empty and hb[i].empty)]
    if not live:
        return 0.0
    wl = w[live] / w[live].sum()
    return float(sum(wi * hist_distance(ha[i], hb[i], p) for wi, i in zip(wl, live)))


def fuse_mr(dis_rssi: float, dis_sig: float, c: float) -> float:
    c = min(max(c, 0.0), 1.0)
    return (dis_rssi + c * dis_sig) / (1.0 + c)


def combine(dis_mr: float, dis_pos: float, w_mr: float = 0.5) -> float:
    return w_mr * dis_mr + (1.0 - w_mr) * dis_pos


@dataclass
class DistanceConfig:
    p: float = 3.0
    weights: str = "softmax_bs"  # or "harmonic"
    bs_method: str = "pairwise"  # or "centroid"
    w_mr: float = 0.5
    c: Optional[float] = None  # None -> estimated from the corpus
    pos_scale: Optional[float] = None  # None -> corpus max of raw dis_pos
    max_traj_points: Optional[int] = 64

    def __post_init__(self):
        if not 0.0 <= self.w_mr <= 1.0:
            raise ValueError("w_mr must be in [0, 1]")


class DistanceCalculator:
    """Composite domain distance with corpus-level constants (c, position scale)."""

    def __init__(self, config: Optional[DistanceConfig] = None, c: float = 1.0,
                 pos_scale: float = 1.0):
        self.config = config or DistanceConfig()
        self.c = c if self.config.c is None else self.config.c
        self.pos_scale = pos_scale if self.config.pos_scale is None else self.config.pos_scale
        self._profiles: dict[int, DomainProfile] = {}

    @classmethod
    def fit(cls, domains: Sequence[Domain], config: Optional[DistanceConfig] = None,
            pos_pairs: Optional[int] = None, seed: int = 0) -> "DistanceCalculator":
        """Estimate ``c`` and the position scale from a domain corpus.

        With ``pos_pairs`` the scale is the maximum over that many random pairs
        instead of over every pair.
        """
        config = config or DistanceConfig()
        calc = cls(config)
        if config.c is None:
            try:
                calc.c = pearson_c(domains)
            except ValueError:
                calc.c = 0.0
        if config.pos_scale is None:
            pairs = [(i, j) for i in range(len(domains)) for j in range(i + 1, len(domains))]
            if pos_pairs is not None and pos_pairs < len(pairs):
                rng = np.random.default_rng(seed)
                pick = rng.choice(len(pairs), size=pos_pairs, replace=False)
                pairs = [pairs[k] for k in sorted(pick)]
            vals = []
            for i, j in pairs:
                pa, pb = calc.profile(domains[i]).packed, calc.profile(domains[j]).packed
                if pa is not None and pb is not None:
                    vals.append(_packed_distance(pa, pb))
            calc.pos_scale = max(vals) if vals and max(vals) > 0 else 1.0
        return calc

    def profile(self, domain: Domain) -> DomainProfile:
        key = id(domain)
        prof = self._profiles.get(key)
        if prof is None or prof.name != domain.name:
            prof = DomainProfile(domain, self.config.max_traj_points)
            self._profiles[key] = prof
            # keep the domain alive while its id is a cache key
            prof._domain = domain
        return prof

    def weights(self, pa: DomainProfile, pb: DomainProfile) -> GroupWeights:
        if self.config.weights == "harmonic":
            return harmonic_weights()
        if self.config.weights != "softmax_bs":
            raise ValueError(f"unknown weighting {self.config.weights!r}")
        dis = []
        for ga, gb in zip(pa.groups, pb.groups):
            dis.append(station_set_distance(ga, gb, self.config.bs_method)
                       if len(ga) and len(gb) else None)
        return softmax_weights(dis)

    def mr_feature_distance(self, a: Domain, b: Domain) -> tuple[float, float, float]:
        pa, pb = self.profile(a), self.profile(b)
        w = self.weights(pa, pb).w
        d_rssi = _weighted_hist_sum(pa.rssi, pb.rssi, w, self.config.p)
        d_sig = _weighted_hist_sum(pa.sig, pb.sig, w, self.config.p)
        return d_rssi, d_sig, fuse_mr(d_rssi, d_sig, self.c)

    def position_distance(self, a: Domain, b: Domain) -> Optional[float]:
        ta, tb = self.profile(a).trajectories, self.profile(b).trajectories
        if not ta or not tb:
            return None
        if _same_trajectories(ta, tb):
            return 0.0
        return _packed_distance(self.profile(a).packed, self.profile(b).packed) / self.pos_scale

    def pair(self, a: Domain, b: Domain) -> DomainDistance:
        if self.profile(b).order_key < self.profile(a).order_key:
            # evaluate in a canonical order so that swapping is bit-exact
            dd = self.pair(b, a)
            return replace(dd, a=dd.b, b=dd.a)
        d_rssi, d_sig, d_mr = self.mr_feature_distance(a, b)
        d_pos = self.position_distance(a, b)
        if d_pos is None:
            w_mr, absent, d_pos = 1.0, True, 0.0
        else:
            w_mr, absent = self.config.w_mr, False
        w_pos = 1.0 - w_mr
        return DomainDistance(a.name, b.name, d_rssi, d_sig, d_mr, d_pos,
                              combine(d_mr, d_pos, w_mr), self.c, w_mr, w_pos, absent)

    def matrix(self, domains: Sequence[Domain]) -> list[DomainDistance]:
        out = []
        for i in range(len(domains)):
            for j in range(i + 1, len(domains)):
                out.append(self.pair(domains[i], domains[j]))
        return out


def domain_distance(a: Domain, b: Domain, w_mr: float = 0.5, w_pos: Optional[float] = None,
                    p: float = 3.0, weights: str = "softmax_bs", c: float = 1.0,
                    pos_scale: float = 1.0, bs_method: str = "pairwise",
                    max_traj_points: Optional[int] = None) -> DomainDistance:
    """One-off composite distance with explicit constants."""
    if w_pos is not None and not math.isclose(w_mr + w_pos, 1.0):
        raise ValueError("w_mr + w_pos must equal 1")
    cfg = DistanceConfig(p=p, weights=weights, bs_method=bs_method, w_mr=w_mr, c=c,
                         pos_scale=pos_scale, max_traj_points=max_traj_points)
    return DistanceCalculator(cfg).pair(a, b)


def mr_feature_distance(a: Domain, b: Domain, weights: str = "softmax_bs", c: float = 1.0,
                        p: float = 3.0) -> tuple[float, float, float]:
    return DistanceCalculator(DistanceConfig(p=p, weights=weights, c=c)).mr_feature_distance(a, b)


def position_distance(a: Domain, b: Domain, pos_scale: float = 1.0,
                      max_traj_points: Optional[int] = None) -> Optional[float]:
    cfg = DistanceConfig(pos_scale=pos_scale, max_traj_points=max_traj_points)
    return DistanceCalculator(cfg).position_distance(a, b)


# -- source selection -------------------------------------------------------------

DEFAULT_K = 3
DEFAULT_CUTOFF = 0.95


def rank_candidates(target: Domain, candidates: Iterable[Domain],
                    calc: DistanceCalculator) -> list[tuple[Domain, DomainDistance]]:
    scored = [(d, calc.pair(target, d)) for d in candidates if d.serving != target.serving]
    scored.sort(key=lambda t: (t[1].dist, t[0].serving))
    return scored


def select_sources(target: Domain, candidates: Iterable[Domain], k: int = DEFAULT_K,
                   cutoff: float = DEFAULT_CUTOFF,
                   calc: Optional[DistanceCalculator] = None) -> list[tuple[Domain, DomainDistance]]:
    """Up to ``k`` nearest candidates with ``dist < cutoff``, ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    calc = calc or DistanceCalculator()
    ranked = rank_candidates(target, candidates, calc)
    return [(d, dd) for d, dd in ranked if dd.dist < cutoff][:k]


# -- LSH ----------------------------------------------------------------------------

@dataclass
class LSHConfig:
    bands: int = 20
    rows: int = 5
    seed: int = 0
    fallback_size: int = 12


class LSHIndex:
    """Random-hyperplane LSH over per-domain RSSI signatures.

    Signatures are centered on the corpus mean before hashing; each band of
    ``rows`` sign bits forms a bucket key.  Colliding domains are re-ranked by
    the exact composite distance.
    """

    def __init__(self, domains: Sequence[Domain], calc: DistanceCalculator,
                 config: Optional[LSHConfig] = None):
        self.config = config or LSHConfig()
        self.calc = calc
        self.domains = list(domains)
        sigs = np.vstack([calc.profile(d).signature() for d in self.domains])
        self.mean = sigs.mean(axis=0)
        rng = np.random.default_rng(self.config.seed)
        self.planes = rng.standard_normal((self.config.bands * self.config.rows, sigs.shape[1]))
        self.keys = self._keys(sigs)
        self.buckets: list[dict[tuple, list[int]]] = [dict() for _ in range(self.config.bands)]
        for i, row in enumerate(self.keys):
            for b, key in enumerate(row):
                self.buckets[b].setdefault(key, []).append(i)

    def _keys(self, sigs: np.ndarray) -> list[list[tuple]]:
        bits = (np.atleast_2d(sigs) - self.mean) @ self.planes.T >= 0.0
        r = self.config.rows
        return [[tuple(row[b * r:(b + 1) * r]) for b in range(self.config.bands)] for row in bits]

    def candidates(self, target: Domain) -> list[int]:
        keys = self._keys(self.calc.profile(target).signature())[0]
        found = set()
        for b, key in enumerate(keys):
            found.update(self.buckets[b].get(key, ()))
        return sorted(i for i in found if self.domains[i].serving != target.serving)

    def topk(self, target: Domain, k: int = DEFAULT_K,
             cutoff: Optional[float] = None) -> list[tuple[Domain, DomainDistance]]:
        idx = self.candidates(target)
        if not idx:
            pool = [i for i, d in enumerate(self.domains) if d.serving != target.serving]
            rng = np.random.default_rng(self.config.seed)
            size = min(len(pool), max(self.config.fallback_size, 4 * k))
            idx = sorted(rng.choice(pool, size=size, replace=False).tolist()) if pool else []
        ranked = rank_candidates(target, [self.domains[i] for i in idx], self.calc)
        if cutoff is not None:
            ranked = [(d, dd) for d, dd in ranked if dd.dist < cutoff]
        return ranked[:k]


def lsh_index(domains: Sequence[Domain], calc: DistanceCalculator,
              config: Optional[LSHConfig] = None) -> LSHIndex:
    return LSHIndex(domains, calc, config)


def lsh_topk(index: LSHIndex, target: Domain, k: int = DEFAULT_K) -> list[tuple[Domain, DomainDistance]]:
    return index.topk(target, k)

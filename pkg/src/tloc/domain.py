"""Serving-station domains in a relative coordinate frame.

Every domain is centered on its serving base station.  Sample labels become
meters east/north of that station and neighbor station ids are replaced by
the cell they occupy in a g x g grid laid over the rectangle spanned by all
neighbor stations seen in the domain, so feature vectors from different
domains live in one comparable space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .mr import (
    DEFAULT_GAP_S,
    MAX_ENTRIES,
    BaseStationId,
    MRSample,
    StationRecord,
    Trajectory,
    parse_mr_csv,
    split_series,
    write_mr_csv,
)

M_PER_DEG_LON = 111320.0
M_PER_DEG_LAT = 110540.0

DEFAULT_G = 20
MISSING_RSSI = -150.0
MISSING_GRID = -1
MISSING_LEVEL = -1
SLOT_FIELDS = ("gx", "gy", "rssi", "asu", "sig")
N_FEATURES = MAX_ENTRIES * len(SLOT_FIELDS)


class RelativePos(NamedTuple):
    x: float
    y: float


class GridId(NamedTuple):
    gx: int
    gy: int


def geo_to_local(center: tuple[float, float], p: tuple[float, float]) -> RelativePos:
    """Equirectangular tangent-plane offset of ``p`` from ``center`` (lon, lat)."""
    lon_c, lat_c = center
    x = (p[0] - lon_c) * math.cos(math.radians(lat_c)) * M_PER_DEG_LON
    y = (p[1] - lat_c) * M_PER_DEG_LAT
    return RelativePos(x, y)


def local_to_geo(center: tuple[float, float], rel: tuple[float, float]) -> tuple[float, float]:
    lon_c, lat_c = center
    lon = lon_c + rel[0] / (math.cos(math.radians(lat_c)) * M_PER_DEG_LON)
    lat = lat_c + rel[1] / M_PER_DEG_LAT
    return (lon, lat)


def geo_to_local_array(center, lonlat: np.ndarray) -> np.ndarray:
    lonlat = np.asarray(lonlat, dtype=float).reshape(-1, 2)
    lon_c, lat_c = center
    out = np.empty_like(lonlat)
    out[:, 0] = (lonlat[:, 0] - lon_c) * math.cos(math.radians(lat_c)) * M_PER_DEG_LON
    out[:, 1] = (lonlat[:, 1] - lat_c) * M_PER_DEG_LAT
    return out


def local_to_geo_array(center, rel: np.ndarray) -> np.ndarray:
    rel = np.asarray(rel, dtype=float).reshape(-1, 2)
    lon_c, lat_c = center
    out = np.empty_like(rel)
    out[:, 0] = lon_c + rel[:, 0] / (math.cos(math.radians(lat_c)) * M_PER_DEG_LON)
    out[:, 1] = lat_c + rel[:, 1] / M_PER_DEG_LAT
    return out


def grid_index(v: float, half_extent: float, g: int) -> int:
    """Floor-and-clamp cell index of coordinate ``v`` on [-half, +half] split in g."""
    width = 2.0 * half_extent
    k = math.floor((v + half_extent) / (width / g))
    return min(max(k, 0), g - 1)


@dataclass
class Domain:
    serving: BaseStationId
    center: tuple[float, float]
    g: int = DEFAULT_G
    samples: list[MRSample] = field(default_factory=list, repr=False)
    labels: list[Optional[RelativePos]] = field(default_factory=list, repr=False)
    radius_m: float = 0.0
    station_pos: dict[BaseStationId, RelativePos] = field(default_factory=dict, repr=False)
    bbox_half_extents: Optional[tuple[float, float]] = None
    station_grid: dict[BaseStationId, GridId] = field(default_factory=dict, repr=False)
    neighbor_groups: list[list[BaseStationId]] = field(default_factory=list, repr=False)
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)
    gap_threshold: float = DEFAULT_GAP_S

    @property
    def name(self) -> str:
        return str(self.serving)

    @property
    def n_labeled(self) -> int:
        return sum(lab is not None for lab in self.labels)

    @property
    def has_grid(self) -> bool:
        return self.bbox_half_extents is not None

    @cached_property
    def features(self) -> np.ndarray:
        """(n_samples, N_FEATURES) matrix, one row per sample in order."""
        if not self.samples:
            return np.empty((0, N_FEATURES))
        return np.vstack([extract_features(self, s) for s in self.samples])

    @property
    def labeled_index(self) -> np.ndarray:
        return np.array([i for i, lab in enumerate(self.labels) if lab is not None], dtype=np.int64)

    def labeled_xy(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.labeled_index
        Y = np.array([self.labels[i] for i in idx], dtype=float).reshape(-1, 2)
        return self.features[idx], Y

    def with_labels(self, keep) -> "Domain":
        """Copy exposing only the labels at indices in ``keep``.

        Radius and trajectories are recomputed; the grid depends on station
        geometry only and is shared.
        """
        keep = set(int(i) for i in keep)
        labels = [lab if i in keep else None for i, lab in enumerate(self.labels)]
        out = replace(self, labels=labels)
        out.__dict__.pop("features", None)
        if "features" in self.__dict__:
            out.__dict__["features"] = self.__dict__["features"]
        _finish_labels(out)
        return out

    def relative_label(self, lonlat) -> RelativePos:
        return geo_to_local(self.center, lonlat)


def _finish_labels(domain: Domain) -> None:
    pts = [lab for lab in domain.labels if lab is not None]
    domain.radius_m = max((math.hypot(*p) for p in pts), default=0.0)
    by_device: dict[str, list[tuple[float, RelativePos]]] = {}
    for s, lab in zip(domain.samples, domain.labels):
        if lab is not None:
            by_device.setdefault(s.device_id, []).append((s.timestamp, lab))
    trajectories = []
    for dev in sorted(by_device):
        series = sorted(by_device[dev], key=lambda tp: tp[0])
        dedup = [series[0]]
        for tp in series[1:]:
            if tp[0] > dedup[-1][0]:
                dedup.append(tp)
        times = [t for t, _ in dedup]
        for sl in split_series(times, domain.gap_threshold):
            chunk = dedup[sl]
            trajectories.append(Trajectory(dev, tuple(t for t, _ in chunk),
                                           tuple((p.x, p.y) for _, p in chunk)))
    domain.trajectories = trajectories


def build_grid(domain: Domain, registry: Optional[dict[BaseStationId, StationRecord]] = None) -> Domain:
    """Lay the g x g station grid over the domain's neighbor rectangle.

    Station relative positions are taken from ``domain.station_pos`` (filled
    from ``registry`` when given).  When no neighbor station has a known
    position the grid is omitted and every GridId is left unset.
    """
    groups: list[list[BaseStationId]] = [[] for _ in range(MAX_ENTRIES)]
    seen: list[set] = [set() for _ in range(MAX_ENTRIES)]
    for s in domain.samples:
        for k, e in enumerate(s.entries):
            if e.station is not None and e.station not in seen[k]:
                seen[k].add(e.station)
                groups[k].append(e.station)
    for grp in groups:
        grp.sort()
    domain.neighbor_groups = groups
    if registry is not None:
        stations = set().union(*seen)
        domain.station_pos = {
            sid: geo_to_local(domain.center, (registry[sid].lon, registry[sid].lat))
            for sid in sorted(stations) if sid in registry
        }
        domain.station_pos[domain.serving] = RelativePos(0.0, 0.0)
    others = [p for sid, p in domain.station_pos.items() if sid != domain.serving]
    hx = max((abs(p.x) for p in others), default=0.0)
    hy = max((abs(p.y) for p in others), default=0.0)
    if hx == 0.0 and hy == 0.0:
        domain.bbox_half_extents = None
        domain.station_grid = {}
    else:
        # a degenerate axis borrows the other axis' extent
        hx = hx or hy
        hy = hy or hx
        domain.bbox_half_extents = (hx, hy)
        domain.station_grid = {
            sid: GridId(grid_index(p.x, hx, domain.g), grid_index(p.y, hy, domain.g))
            for sid, p in domain.station_pos.items()
        }
    domain.__dict__.pop("features", None)
    return domain


def extract_features(domain: Domain, sample: MRSample) -> np.ndarray:
    """Fixed-length vector: per slot (gx, gy, rssi, asu, sig), sentinels for gaps."""
    v = np.empty(N_FEATURES)
    for k in range(MAX_ENTRIES):
        base = k * len(SLOT_FIELDS)
        if k < len(sample.entries):
            e = sample.entries[k]
            gid = domain.station_grid.get(e.station) if e.station is not None else None
            if gid is None:
                v[base] = v[base + 1] = MISSING_GRID
            else:
                v[base], v[base + 1] = gid
            v[base + 2] = e.rssi
            v[base + 3] = e.asu_level
            v[base + 4] = e.signal_level
        else:
            v[base:base + 5] = (MISSING_GRID, MISSING_GRID, MISSING_RSSI, MISSING_LEVEL, MISSING_LEVEL)
    return v


def partition_by_serving(samples: Sequence[MRSample], registry: dict[BaseStationId, StationRecord],
                         g: int = DEFAULT_G, gap_threshold: float = DEFAULT_GAP_S) -> list[Domain]:
    """Group samples by serving station into domains ordered by station id."""
    buckets: dict[BaseStationId, list[MRSample]] = {}
    for s in samples:
        buckets.setdefault(s.serving, []).append(s)
    missing = sorted(sid for sid in buckets if sid not in registry)
    if missing:
        raise KeyError(f"serving stations missing from registry: {', '.join(map(str, missing))}")
    domains = []
    for sid in sorted(buckets):
        rec = registry[sid]
        center = (rec.lon, rec.lat)
        members = buckets[sid]
        labels = [geo_to_local(center, s.label) if s.label is not None else None for s in members]
        d = Domain(serving=sid, center=center, g=g, samples=members, labels=labels,
                   gap_threshold=gap_threshold)
        _finish_labels(d)
        build_grid(d, registry)
        domains.append(d)
    return domains


# -- persistence -------------------------------------------------------------

def save_domains(domains: Sequence[Domain], out_dir) -> Path:
    """One MR CSV per domain plus ``manifest.json`` with frame and grid data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in domains:
        fname = f"domain_{d.name}.csv"
        write_mr_csv(out / fname, d.samples)
        entries.append({
            "serving": d.name,
            "file": fname,
            "center": list(d.center),
            "radius_m": d.radius_m,
            "g": d.g,
            "bbox_half_extents": list(d.bbox_half_extents) if d.bbox_half_extents else None,
            "gap_threshold": d.gap_threshold,
            "stations": {
                str(sid): {"x": p.x, "y": p.y,
                           "grid": list(d.station_grid[sid]) if sid in d.station_grid else None}
                for sid, p in sorted(d.station_pos.items())
            },
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"domains": entries}, indent=1))
    return manifest


def load_domains(in_dir) -> list[Domain]:
    root = Path(in_dir)
    meta = json.loads((root / "manifest.json").read_text())
    domains = []
    for e in meta["domains"]:
        samples = parse_mr_csv(root / e["file"])
        center = tuple(e["center"])
        d = Domain(serving=BaseStationId.parse(e["serving"]), center=center, g=e["g"],
                   samples=samples,
                   labels=[geo_to_local(center, s.label) if s.label else None for s in samples],
                   gap_threshold=e.get("gap_threshold", DEFAULT_GAP_S))
        _finish_labels(d)
        d.station_pos = {BaseStationId.parse(k): RelativePos(v["x"], v["y"])
                         for k, v in e["stations"].items()}
        build_grid(d)
        domains.append(d)
    return domains

"""Synthetic cellular worlds with ground truth.

Stations are scattered by dart throwing (blue noise) over rectangular
regions whose streets form a regular grid.  Devices walk between random
street intersections at pedestrian speed and report the seven strongest
stations under a log-distance path-loss model with log-normal shadowing.

Everything is a pure function of ``WorldConfig.seed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .domain import local_to_geo_array
from .mr import MAX_ENTRIES, BaseStationId, MRSample, NeighborEntry, StationRecord

RSSI_FLOOR = -113.0
RSSI_CEIL = -43.0
EPOCH = 1_500_000_000.0
SESSION_GAP_S = 3 * 3600.0


@dataclass
class WorldConfig:
    seed: int = 0
    extent: tuple[float, float] = (3000.0, 3000.0)
    n_stations: int = 30
    street_spacing: float = 100.0
    p0: float = -15.0  # dBm at 1 m
    eta: float = 3.0
    sigma: float = 4.0
    n_devices: int = 60
    sessions: int = 1  # walks per device, separated by SESSION_GAP_S
    sample_rate: float = 0.2  # samples per second
    duration_s: float = 1800.0
    speed: tuple[float, float] = (1.0, 2.0)
    mode: str = "2G"
    origin: tuple[float, float] = (121.4, 31.2)  # lon/lat of the planar origin
    scarcity: dict = field(default_factory=dict)  # BaseStationId -> label keep fraction
    spacing_factor: float = 0.7  # blue-noise minimum distance / sqrt(area per station)

    def __post_init__(self):
        if not 2.0 <= self.eta <= 5.0:
            raise ValueError("eta must lie in [2, 5]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if min(self.extent) <= 0 or self.street_spacing <= 0:
            raise ValueError("extents and street spacing must be positive")
        if self.sessions < 1:
            raise ValueError("sessions must be >= 1")
        if self.n_stations < 1 or self.n_devices < 0:
            raise ValueError("need >= 1 station and >= 0 devices")
        if self.sample_rate <= 0 or self.duration_s <= 0:
            raise ValueError("sample_rate and duration_s must be positive")
        if not 0 < self.speed[0] <= self.speed[1]:
            raise ValueError("speed band must satisfy 0 < lo <= hi")
        if self.mode not in ("2G", "4G"):
            raise ValueError("mode must be 2G or 4G")


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle with streets every ``spacing`` meters."""
    x0: float
    y0: float
    x1: float
    y1: float
    spacing: float

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def streets(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.arange(self.x0, self.x1 + 1e-9, self.spacing)
        ys = np.arange(self.y0, self.y1 + 1e-9, self.spacing)
        return xs, ys

    def overlaps(self, other: "Region", margin: float = 0.0) -> bool:
        return not (self.x1 + margin <= other.x0 or other.x1 + margin <= self.x0
                    or self.y1 + margin <= other.y0 or other.y1 + margin <= self.y0)


@dataclass
class World:
    config: WorldConfig
    station_ids: list[BaseStationId]
    station_xy: np.ndarray  # (n, 2) planar meters
    regions: list[Region]  # where devices walk
    reserved: list[Region] = field(default_factory=list)  # footprints no twin may overlap
    gain_db: Optional[np.ndarray] = None  # per-station transmit offset added to p0

    def __post_init__(self):
        if self.gain_db is None:
            self.gain_db = np.zeros(len(self.station_ids))

    def registry(self) -> dict[BaseStationId, StationRecord]:
        lonlat = local_to_geo_array(self.config.origin, self.station_xy)
        return {sid: StationRecord(sid, float(lon), float(lat))
                for sid, (lon, lat) in zip(self.station_ids, lonlat)}

    def index_of(self, sid: BaseStationId) -> int:
        return self.station_ids.index(sid)


@dataclass
class Trace:
    device_id: str
    times: np.ndarray
    xy: np.ndarray
    region: int = 0


def station_id(i: int) -> BaseStationId:
    return BaseStationId(100 + i // 100, 1000 + i)


def blue_noise(n: int, region: Region, min_dist: float, rng: np.random.Generator,
               max_attempts: Optional[int] = None) -> np.ndarray:
    """Dart throwing: accept uniform points at least ``min_dist`` from all others."""
    max_attempts = max_attempts or 2000 * n
    pts = np.empty((n, 2))
    k = 0
    attempts = 0
    while k < n:
        if attempts >= max_attempts:
            raise ValueError(f"infeasible density: placed {k} of {n} stations")
        batch = rng.uniform((region.x0, region.y0), (region.x1, region.y1), size=(64, 2))
        for p in batch:
            attempts += 1
            if k == 0 or np.min(np.hypot(*(pts[:k] - p).T)) >= min_dist:
                pts[k] = p
                k += 1
                if k == n:
                    break
    return pts


def generate_world(config: WorldConfig) -> World:
    rng = np.random.default_rng([config.seed, 0])
    w, h = config.extent
    region = Region(0.0, 0.0, w, h, config.street_spacing)
    min_dist = config.spacing_factor * math.sqrt(region.area / config.n_stations)
    xy = blue_noise(config.n_stations, region, min_dist, rng)
    return World(config, [station_id(i) for i in range(config.n_stations)], xy, [region], [region])


def plant_twin_domains(world: World, offset: tuple[float, float], center: Optional[BaseStationId] = None,
                       half_window: Optional[float] = None,
                       walk_half: Optional[float] = None,
                       gain_db: float = 0.0) -> tuple[World, dict[BaseStationId, BaseStationId]]:
    """Copy a neighborhood translated by ``offset``.

    Without ``center`` the whole base region is copied, streets and devices
    included.  Otherwise stations inside the square of half side
    ``half_window`` around ``center`` are copied and devices of the copy walk
    the inner square of half side ``walk_half`` (default half the window) so
    that they stay in coverage.  Streets stay congruent when the offset and
    window corners are multiples of the street spacing.  Copied stations
    transmit ``gain_db`` louder than their originals.  Returns the new world
    and the original -> copy id map.
    """
    cfg = world.config
    s = cfg.street_spacing
    dx, dy = offset
    if center is None:
        win = world.regions[0]
        walk = Region(win.x0 + dx, win.y0 + dy, win.x1 + dx, win.y1 + dy, s)
    else:
        if half_window is None:
            half_window = 2.5 * math.sqrt(world.regions[0].area / cfg.n_stations)
        half_window = math.ceil(half_window / s) * s
        c = world.station_xy[world.index_of(center)]
        cx, cy = np.round(c / s) * s
        win = Region(cx - half_window, cy - half_window, cx + half_window, cy + half_window, s)
        wh = math.ceil((walk_half if walk_half is not None else half_window / 2) / s) * s
        walk = Region(cx - wh + dx, cy - wh + dy, cx + wh + dx, cy + wh + dy, s)
    copy = Region(win.x0 + dx, win.y0 + dy, win.x1 + dx, win.y1 + dy, s)
    for r in world.reserved:
        if copy.overlaps(r):
            raise ValueError("twin window overlaps an existing region")
    inside = [i for i, (x, y) in enumerate(world.station_xy)
              if win.x0 <= x <= win.x1 and win.y0 <= y <= win.y1]
    n0 = len(world.station_ids)
    mapping = {}
    new_ids = list(world.station_ids)
    new_xy = [world.station_xy]
    for k, i in enumerate(inside):
        sid = station_id(n0 + k)
        mapping[world.station_ids[i]] = sid
        new_ids.append(sid)
        new_xy.append(world.station_xy[i] + np.array(offset, dtype=float))
    gains = np.concatenate([world.gain_db, world.gain_db[inside] + gain_db])
    out = World(cfg, new_ids, np.vstack(new_xy), world.regions + [walk], world.reserved + [copy], gains)
    return out, mapping


# -- mobility -----------------------------------------------------------------

def _walk(region: Region, duration: float, rate: float, speed: tuple[float, float],
          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = region.streets()
    pos = np.array([rng.choice(xs), rng.choice(ys)])
    times = [0.0]
    verts = [pos.copy()]
    t = 0.0
    while t < duration:
        goal = np.array([rng.choice(xs), rng.choice(ys)])
        if np.array_equal(goal, pos):
            continue
        v = rng.uniform(*speed)
        # Manhattan route along streets, axis order chosen at random
        corner = np.array([goal[0], pos[1]]) if rng.random() < 0.5 else np.array([pos[0], goal[1]])
        for p in (corner, goal):
            d = float(np.hypot(*(p - pos)))
            if d == 0.0:
                continue
            t += d / v
            times.append(t)
            verts.append(p.copy())
            pos = p
    times = np.array(times)
    verts = np.array(verts)
    sample_t = np.arange(0.0, duration, 1.0 / rate)
    xy = np.column_stack([np.interp(sample_t, times, verts[:, 0]),
                          np.interp(sample_t, times, verts[:, 1])])
    return sample_t, xy


def simulate_traces(world: World, config: Optional[WorldConfig] = None) -> list[Trace]:
    """Random-waypoint walks on the street grids; devices split by region area."""
    cfg = config or world.config
    areas = np.array([r.area for r in world.regions])
    traces = []
    period = cfg.duration_s + SESSION_GAP_S
    for i in range(cfg.n_devices):
        rng = np.random.default_rng([cfg.seed, 1, i])
        for k in range(cfg.sessions):
            reg = int(rng.choice(len(world.regions), p=areas / areas.sum()))
            t, xy = _walk(world.regions[reg], cfg.duration_s, cfg.sample_rate, cfg.speed, rng)
            start = EPOCH + period * (i * cfg.sessions + k)
            traces.append(Trace(f"dev{i:04d}", start + t, xy, reg))
    return traces


# -- measurement reports -------------------------------------------------------

def signal_level(asu: int) -> int:
    """Five quality bands over the GSM ASU scale."""
    if asu <= 2:
        return 0
    if asu >= 12:
        return 4
    if asu >= 8:
        return 3
    if asu >= 5:
        return 2
    return 1


def received_power(dist, p0: float, eta: float) -> np.ndarray:
    return p0 - 10.0 * eta * np.log10(np.maximum(dist, 1.0))


def emit_mr(world: World, traces: Sequence[Trace], config: Optional[WorldConfig] = None) -> list[MRSample]:
    """One MR sample per trace point; labels dropped per the scarcity plan."""
    cfg = config or world.config
    stations = world.station_xy
    samples = []
    for di, tr in enumerate(traces):
        rng = np.random.default_rng([cfg.seed, 2, di])
        diff = tr.xy[:, None, :] - stations[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        mean = received_power(dist, cfg.p0, cfg.eta) + world.gain_db[None, :]
        raw = mean + rng.normal(0.0, cfg.sigma, size=mean.shape) if cfg.sigma > 0 else mean
        rssi = np.clip(np.round(raw), RSSI_FLOOR, RSSI_CEIL)
        # coverage is decided by distance; shadowing only perturbs the reading
        audible = mean >= RSSI_FLOOR
        labels = local_to_geo_array(cfg.origin, tr.xy)
        for p in range(len(tr.times)):
            cand = np.flatnonzero(audible[p])
            if len(cand) == 0:
                raise ValueError(f"{tr.device_id} at t={tr.times[p]}: no station in range")
            top = cand[np.argsort(-rssi[p, cand], kind="stable")][:MAX_ENTRIES]
            entries = []
            for k, j in enumerate(top):
                r = float(rssi[p, j])
                asu = int(round((r - RSSI_FLOOR) / 2.0))
                sid = world.station_ids[j] if (cfg.mode == "2G" or k == 0) else None
                entries.append(NeighborEntry(sid, r, asu, signal_level(asu)))
            samples.append(MRSample(float(tr.times[p]), tr.device_id, tuple(entries),
                                    (float(labels[p, 0]), float(labels[p, 1]))))
    return apply_scarcity(samples, cfg.scarcity, cfg.seed)


def apply_scarcity(samples: Sequence[MRSample], plan: dict, seed: int = 0) -> list[MRSample]:
    """Keep exactly ``round(fraction * labeled)`` labels in each planned domain."""
    if not plan:
        return list(samples)
    by_domain: dict[BaseStationId, list[int]] = {}
    for i, s in enumerate(samples):
        if s.label is not None:
            by_domain.setdefault(s.serving, []).append(i)
    drop = set()
    for sid in sorted(plan):
        frac = plan[sid]
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"keep fraction for {sid} outside [0, 1]")
        members = by_domain.get(sid, [])
        keep_n = int(round(frac * len(members)))
        rng = np.random.default_rng([seed, 3, sid.rnc_id, sid.cell_id])
        keep = set(rng.choice(len(members), size=keep_n, replace=False).tolist()) if members else set()
        drop.update(m for k, m in enumerate(members) if k not in keep)
    return [replace(s, label=None) if i in drop else s for i, s in enumerate(samples)]


def synthesize(config: WorldConfig) -> tuple[World, list[MRSample]]:
    world = generate_world(config)
    return world, emit_mr(world, simulate_traces(world, config), config)


# -- planted-similar scenario ---------------------------------------------------

@dataclass
class TwinScenario:
    world: World
    samples: list[MRSample]
    targets: list[BaseStationId]  # scarce copied domains
    twin_of: dict[BaseStationId, BaseStationId]  # target -> original station
    siblings: dict[BaseStationId, list[BaseStationId]]  # target -> every congruent station

    def registry(self) -> dict[BaseStationId, StationRecord]:
        return self.world.registry()


def twin_scenario(config: WorldConfig, n_copies: int = 3, n_targets: int = 2,
                  target_labels: int = 40, gap: float = 4000.0,
                  gain_db: float = 0.0) -> TwinScenario:
    """Base world plus ``n_copies`` translated copies; ``n_targets`` copied domains go scarce.

    Copies sit side by side east of the base region, ``gap`` meters apart, so
    no signal crosses over.  Targets are drawn among copied domains holding
    at least twice ``target_labels`` samples and keep exactly
    ``target_labels`` labels.
    """
    world = generate_world(config)
    base = world.regions[0]
    s = config.street_spacing
    step = math.ceil((base.x1 - base.x0 + gap) / s) * s
    copies: list[dict[BaseStationId, BaseStationId]] = []
    for k in range(1, n_copies + 1):
        world, mapping = plant_twin_domains(world, (k * step, 0.0), gain_db=gain_db)
        copies.append(mapping)
    samples = emit_mr(world, simulate_traces(world, config), replace(config, scarcity={}))
    counts: dict[BaseStationId, int] = {}
    for smp in samples:
        counts[smp.serving] = counts.get(smp.serving, 0) + 1
    origin = {c: o for m in copies for o, c in m.items()}
    family = {o: [o] + [m[o] for m in copies] for o in copies[0]} if copies else {}
    eligible = sorted(c for c in origin if counts.get(c, 0) >= 2 * target_labels)
    rng = np.random.default_rng([config.seed, 4])
    picks: list[BaseStationId] = []
    for i in rng.permutation(len(eligible)):
        c = eligible[i]
        # one target per family keeps the targets independent
        if all(origin[c] != origin[p] for p in picks):
            picks.append(c)
        if len(picks) == n_targets:
            break
    if len(picks) < n_targets:
        raise ValueError("not enough populated copies for the requested targets")
    picks.sort()
    plan = {t: target_labels / counts[t] for t in picks}
    plan.update(config.scarcity)
    samples = apply_scarcity(samples, plan, config.seed)
    return TwinScenario(world, samples, picks, {t: origin[t] for t in picks},
                        {t: [m for m in family[origin[t]] if m != t] for t in picks})


TWIN_WORLD = dict(n_stations=10, extent=(1400.0, 1400.0), p0=10.0, eta=4.0, sigma=2.0,
                  sessions=10, duration_s=300.0)


def twin_config(seed: int = 0, **overrides) -> WorldConfig:
    """Compact, densely sampled base world suited to :func:`twin_scenario`."""
    return WorldConfig(seed=seed, **{**TWIN_WORLD, **overrides})

import numpy as np
import pytest

from tloc.domain import geo_to_local_array
from tloc.mr import asu_check
from tloc.synth import (RSSI_CEIL, RSSI_FLOOR, Region, WorldConfig, apply_scarcity, blue_noise,
                        generate_world, plant_twin_domains, received_power, signal_level, synthesize)


def test_generation_is_deterministic():
    cfg = WorldConfig(seed=3, extent=(800.0, 800.0), n_stations=5, n_devices=4, duration_s=200.0)
    w1, s1 = synthesize(cfg)
    w2, s2 = synthesize(cfg)
    assert s1 == s2 and np.array_equal(w1.station_xy, w2.station_xy)
    _, s3 = synthesize(WorldConfig(**{**cfg.__dict__, "seed": 4}))
    assert s3 != s1


def test_emitted_records_are_physically_consistent(small_world):
    world, samples = small_world
    assert samples
    sid_set = set(world.station_ids)
    for s in samples[:2000]:
        rssi = [e.rssi for e in s.entries]
        assert rssi == sorted(rssi, reverse=True)
        assert all(RSSI_FLOOR <= r <= RSSI_CEIL for r in rssi)
        assert len({e.station for e in s.entries}) == len(s.entries)
        for e in s.entries:
            assert e.station in sid_set
            assert e.signal_level == signal_level(e.asu_level)
        assert not any(asu_check(s))
        assert s.label is not None


def test_serving_station_tends_to_be_close(small_world):
    world, samples = small_world
    labels = np.array([s.label for s in samples])
    pos = geo_to_local_array(world.config.origin, labels)
    serving = np.array([world.station_xy[world.index_of(s.serving)] for s in samples])
    d_serving = np.hypot(*(pos - serving).T)
    d_nearest = np.min(np.hypot(pos[:, None, 0] - world.station_xy[None, :, 0],
                                pos[:, None, 1] - world.station_xy[None, :, 1]), axis=1)
    assert np.median(d_serving - d_nearest) < 1.0


def test_signal_level_bands():
    assert [signal_level(a) for a in (0, 2, 3, 4, 5, 7, 8, 11, 12, 31)] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_received_power_log_distance():
    assert received_power(np.array([10.0]), -15.0, 3.0)[0] == -45.0
    assert received_power(np.array([0.0]), -15.0, 3.0)[0] == -15.0


def test_blue_noise_respects_min_distance():
    rng = np.random.default_rng(0)
    pts = blue_noise(20, Region(0, 0, 1000, 1000, 100), 120.0, rng)
    d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    assert np.all(d[np.triu_indices(20, 1)] >= 120.0)
    with pytest.raises(ValueError, match="infeasible"):
        blue_noise(50, Region(0, 0, 100, 100, 10), 80.0, np.random.default_rng(0), max_attempts=500)


def test_scarcity_keeps_exact_label_counts(small_world):
    world, samples = small_world
    counts = {}
    for s in samples:
        counts[s.serving] = counts.get(s.serving, 0) + 1
    sid = max(counts, key=counts.get)
    thinned = apply_scarcity(samples, {sid: 0.1}, seed=1)
    kept = sum(s.label is not None for s in thinned if s.serving == sid)
    assert kept == round(0.1 * counts[sid])
    assert all(t.label == s.label for s, t in zip(samples, thinned) if s.serving != sid)
    assert thinned == apply_scarcity(samples, {sid: 0.1}, seed=1)


def test_planted_copy_is_a_translation():
    world = generate_world(WorldConfig(seed=1, extent=(1000.0, 1000.0), n_stations=6))
    planted, mapping = plant_twin_domains(world, (5000.0, 0.0))
    assert len(mapping) == 6
    for orig, copy in mapping.items():
        a = planted.station_xy[planted.index_of(orig)]
        b = planted.station_xy[planted.index_of(copy)]
        assert np.array_equal(b - a, [5000.0, 0.0])
    with pytest.raises(ValueError):
        plant_twin_domains(planted, (5000.0, 0.0))


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(eta=1.0)
    with pytest.raises(ValueError):
        WorldConfig(mode="5G")
    with pytest.raises(ValueError):
        WorldConfig(sessions=0)


def test_twin_scenario_targets(twin):
    sc, domains = twin
    by = {d.serving: d for d in domains}
    for t in sc.targets:
        assert by[t].n_labeled == 40
        assert sc.twin_of[t] in sc.siblings[t]
        assert t not in sc.siblings[t]
    assert len({sc.twin_of[t] for t in sc.targets}) == len(sc.targets)

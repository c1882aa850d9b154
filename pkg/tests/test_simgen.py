import filecmp

import numpy as np
import pytest
from scipy import stats

from c3stability.c3score import score_windows
from c3stability.core import ConfigError, DataError, TERRAINS, SPEEDS
from c3stability.pipeline import make_windows
from c3stability.simgen import (DEFAULT_MATRIX, DEFAULT_TERRAINS, CampaignEntry, SimConfig,
                                TerrainProfile, check_terrain_order, derive_seed,
                                generate_campaign, load_sim_config, simulate_trial)

DIRT = DEFAULT_TERRAINS[2]


def _tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_gives_identical_log():
    cfg = SimConfig(seed=11, duration=4.0)
    a, b = simulate_trial(DIRT, 1.0, cfg), simulate_trial(DIRT, 1.0, cfg)
    for name in ("imu", "gps", "marker", "detected"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_different_seeds_differ():
    a = simulate_trial(DIRT, 1.0, SimConfig(seed=1, duration=4.0))
    b = simulate_trial(DIRT, 1.0, SimConfig(seed=2, duration=4.0))
    assert not np.array_equal(a.imu, b.imu)


def test_disturbance_free_limit():
    cfg = SimConfig(seed=3, duration=6.0, noise_floor=0.0, pixel_noise=0.0)
    log = simulate_trial(TerrainProfile("pavement", 0.0), 1.5, cfg)
    centers = log.marker[log.detected, 1:]
    assert np.all(centers == centers[0])
    assert all(s.c3_raw == 0.0 for s in score_windows(log, make_windows(log)))


@pytest.mark.parametrize("rates", [(200.0, 10.0, 60.0), (100.0, 5.0, 30.0), (333.0, 7.0, 29.97)])
@pytest.mark.parametrize("duration", [3.0, 7.3])
def test_rate_fidelity(rates, duration):
    imu_rate, gps_rate, cam_rate = rates
    cfg = SimConfig(imu_rate=imu_rate, gps_rate=gps_rate, cam_rate=cam_rate, duration=duration)
    log = simulate_trial(DIRT, 1.0, cfg)
    assert abs(len(log.imu) - imu_rate * duration) <= 1
    assert abs(len(log.gps) - gps_rate * duration) <= 1
    assert abs(len(log.marker) - cam_rate * duration) <= 1


@pytest.mark.parametrize("speed", [0.0, -1.0])
def test_non_positive_speed_rejected(speed):
    with pytest.raises(DataError):
        simulate_trial(DIRT, speed, SimConfig(duration=2.0))


def test_non_field_speed_is_flagged(caplog):
    simulate_trial(DIRT, 0.7, SimConfig(duration=2.0))
    assert "not one of the field speeds" in caplog.text


def test_robot_approaches_marker():
    log = simulate_trial(DIRT, 1.0, SimConfig(seed=4, gps_noise=0.0))
    x = log.gps[:, 1]
    dist = log.marker_position[0] - x
    assert dist[0] == pytest.approx(40.0, abs=1e-9)
    # 14 s run: 1 s still, 0.5 s ramp, then 12.5 s at 1 m/s; ~12.75 m travelled
    assert x[-1] == pytest.approx(12.75 - 0.1, abs=0.3)


def test_jitter_grows_with_roughness_and_speed():
    cfg = SimConfig(seed=5, pixel_noise=0.0)

    def spread(roughness, speed):
        log = simulate_trial(TerrainProfile("dirt", roughness), speed, cfg)
        return np.nanstd(log.marker[:, 1])

    assert spread(0.5, 1.0) < spread(1.0, 1.0) < spread(1.5, 1.0)
    assert spread(1.0, 0.5) < spread(1.0, 1.0) < spread(1.0, 1.5)


def test_campaign_writes_one_directory_per_trial(tmp_path):
    matrix = [CampaignEntry(t, v, 1) for t in TERRAINS for v in SPEEDS]
    logs = generate_campaign(matrix, SimConfig(duration=2.0), out_dir=tmp_path)
    dirs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    assert len(logs) == len(dirs) == 12
    assert len({log.meta.seed for log in logs}) == 12


def test_campaign_is_byte_reproducible(tmp_path):
    matrix = [CampaignEntry("grass", 1.0, 2), CampaignEntry("dirt", 0.5, 1)]
    generate_campaign(matrix, SimConfig(seed=9, duration=2.0), out_dir=tmp_path / "a")
    generate_campaign(matrix, SimConfig(seed=9, duration=2.0), out_dir=tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_list == cmp.right_list
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_derived_seeds_are_distinct():
    seeds = {derive_seed(0, k) for k in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(0, 5) != derive_seed(1, 5)


def test_default_matrix_has_86_runs():
    assert sum(e.n_trials for e in DEFAULT_MATRIX) == 86
    assert {(e.terrain, e.speed) for e in DEFAULT_MATRIX} == {(t, v) for t in TERRAINS for v in SPEEDS}


def test_empty_matrix_rejected():
    with pytest.raises(ConfigError):
        generate_campaign([])


def test_terrain_roughness_must_increase():
    with pytest.raises(ConfigError):
        check_terrain_order([TerrainProfile("pavement", 1.0), TerrainProfile("grass", 0.5),
                             TerrainProfile("dirt", 2.0), TerrainProfile("dirt_rocks", 3.0)])


def test_sim_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"imu_rate": 200.0, "warp": 9})


def test_sim_config_round_trip():
    cfg = SimConfig(seed=3, band_hz=(2.0, 6.0))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


def test_load_sim_config(tmp_path):
    path = tmp_path / "sim.json"
    path.write_text('{"sim": {"seed": 4}, "matrix": [{"terrain": "dirt", "speed": 1.0,'
                    ' "n_trials": 2}]}')
    cfg, terrains, matrix = load_sim_config(path)
    assert cfg.seed == 4 and list(terrains) == list(DEFAULT_TERRAINS)
    assert matrix == [CampaignEntry("dirt", 1.0, 2)]


def test_imu_energy_correlates_with_c3(small_campaign):
    energy, c3 = [], []
    for log in small_campaign:
        frames = make_windows(log)
        for frame, score in zip(frames, score_windows(log, frames)):
            # gyro plus lateral and vertical accel, mean removed per window
            rows = frame.channels[[0, 1, 2, 4, 5]]
            energy.append(float(np.sum(np.var(rows, axis=1))))
            c3.append(score.c3_raw)
    r, _ = stats.pearsonr(energy, c3)
    assert r > 0.3

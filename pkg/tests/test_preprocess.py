import math

import pytest
import torch
from conftest import to_degrees

from torchcomove.config import ConfigurationError
from torchcomove.geo import EARTH_RADIUS, KNOT, TimestampedPoint, Trajectory
from torchcomove.preprocess import (
    OnlineCleaner,
    PreprocessConfig,
    align_linear,
    filter_speed_outliers,
    grid_epoch,
    interpolate_at,
    preprocess_trajectories,
    remove_stop_points,
    segment_by_gap,
    split_contiguous,
)


def north_track(t, y, object_id="a") -> Trajectory:
    """Trajectory moving along a meridian, offsets in meters."""
    lonlat = [to_degrees(0.0, v) for v in y]
    return Trajectory(
        object_id,
        torch.tensor(t, dtype=torch.float64),
        torch.tensor([p[0] for p in lonlat], dtype=torch.float64),
        torch.tensor([p[1] for p in lonlat], dtype=torch.float64),
    )


def test_config_defaults():
    cfg = PreprocessConfig()
    assert (cfg.speed_max, cfg.gap_dt, cfg.stop_speed, cfg.align_rate) == (
        50.0,
        1800.0,
        0.5,
        60.0,
    )


@pytest.mark.parametrize(
    "kwargs",
    [{"speed_max": 0.0}, {"gap_dt": -1.0}, {"stop_speed": 60.0}, {"align_rate": math.nan}],
)
def test_config_invalid(kwargs):
    with pytest.raises(ConfigurationError):
        PreprocessConfig(**kwargs)


def test_speed_outlier_dropped():
    # 1852 m in 60 s is 60 knots
    traj = north_track([0.0, 60.0], [0.0, 1852.0])
    assert len(filter_speed_outliers(traj, 50.0)) == 1
    assert len(filter_speed_outliers(traj, 70.0)) == 2


@pytest.mark.parametrize("n", [0, 1, 10])
def test_speed_filter_stationary(n):
    traj = north_track([60.0 * k for k in range(n)], [0.0] * n)
    assert len(filter_speed_outliers(traj, 50.0)) == n


def test_speed_filter_property():
    g = torch.Generator().manual_seed(3)
    steps = 300.0 * torch.rand(100, generator=g, dtype=torch.float64)
    spikes = torch.rand(100, generator=g) < 0.1
    steps[spikes] += 5000.0
    y = torch.cumsum(steps, 0)
    traj = north_track([60.0 * k for k in range(100)], y.tolist())
    kept = filter_speed_outliers(traj, 50.0)
    assert kept.t[0] == traj.t[0]
    assert (kept.speeds() <= 50.0 * KNOT).all()


def test_stop_points_collapse():
    traj = north_track([60.0 * k for k in range(10)], [0.0] * 10)
    stopped = remove_stop_points(traj, 0.5)
    assert len(stopped) == 1 and stopped.t[0] == 0.0


def test_stop_points_moving_unchanged():
    # 10 knots
    step = 10.0 * KNOT * 60.0
    traj = north_track([60.0 * k for k in range(10)], [step * k for k in range(10)])
    assert len(remove_stop_points(traj, 0.5)) == 10


def test_stop_points_anchored_segment():
    step = 10.0 * KNOT * 60.0
    t = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0, 360.0, 420.0, 480.0, 540.0]
    y = [0.0, step, 2 * step] + [2 * step] * 5 + [3 * step, 4 * step]
    stopped = remove_stop_points(north_track(t, y), 0.5)
    assert stopped.t.tolist() == [0.0, 60.0, 120.0, 480.0, 540.0]


def test_segment_by_gap():
    traj = north_track([0.0, 60.0, 1920.0], [0.0, 10.0, 20.0])
    parts = segment_by_gap(traj, 1800.0)
    assert [len(p) for p in parts] == [2, 1]
    assert len(segment_by_gap(traj, 2000.0)) == 1


def test_segment_conserves_points():
    g = torch.Generator().manual_seed(1)
    jumps = (torch.rand(200, generator=g, dtype=torch.float64) > 0.9).to(torch.float64)
    dt = 60.0 + 3000.0 * jumps
    t = torch.cumsum(dt, 0)
    traj = north_track(t.tolist(), [0.0] * 200)
    parts = segment_by_gap(traj, 1800.0)
    assert all(len(p) > 0 for p in parts)
    assert torch.equal(torch.cat([p.t for p in parts]), traj.t)


def test_align_midpoint():
    traj = Trajectory("a", [0.0, 120.0], [0.0, 2.0], [0.0, 0.0])
    aligned = align_linear(traj, 60.0, 0.0)
    assert aligned.t.tolist() == [0.0, 60.0, 120.0]
    assert torch.allclose(aligned.lon, torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64))


def test_align_on_grid_unchanged():
    t = torch.arange(10, dtype=torch.float64) * 60.0 + 600.0
    lon = torch.rand(10, dtype=torch.float64)
    lat = torch.rand(10, dtype=torch.float64)
    aligned = align_linear(Trajectory("a", t, lon, lat), 60.0, 0.0)
    assert torch.equal(aligned.t, t)
    assert torch.equal(aligned.lon, lon)
    assert torch.equal(aligned.lat, lat)


def test_align_no_extrapolation():
    traj = Trajectory("a", [30.0, 170.0], [0.0, 1.0], [0.0, 0.0])
    aligned = align_linear(traj, 60.0, 0.0)
    assert aligned.t.tolist() == [60.0, 120.0]


def test_align_short():
    assert len(align_linear(Trajectory("a", [0.0], [0.0], [0.0]), 60.0, 0.0)) == 0


def test_align_quadratic_error_bound():
    a = 1e-7
    t = torch.arange(0.0, 1800.0, 90.0, dtype=torch.float64) + 15.0
    traj = Trajectory("a", t, a * t**2, torch.zeros_like(t))
    aligned = align_linear(traj, 60.0, 0.0)
    error = (aligned.lon - a * aligned.t**2).abs().max()
    assert error <= 90.0**2 / 8.0 * 2.0 * a + 1e-15


def test_grid_epoch():
    assert grid_epoch(1527897630.0) == 1527897600.0
    assert grid_epoch(1527897600.0) == 1527897600.0


def test_split_contiguous():
    traj = Trajectory("a", [0.0, 60.0, 120.0, 240.0, 300.0], [0.0] * 5, [0.0] * 5)
    assert [len(p) for p in split_contiguous(traj, 60.0)] == [3, 2]


def test_preprocess_shared_grid():
    step = 10.0 * KNOT * 60.0
    a = north_track([10.0, 70.0, 130.0, 190.0], [step * k for k in range(4)], "a")
    b = north_track([45.0, 105.0, 4000.0, 4060.0], [0.0, step, 50000.0, 50000.0 + step], "b")
    out = preprocess_trajectories([a, b], PreprocessConfig())
    assert [t.object_id for t in out] == ["a", "b", "b"]
    for traj in out:
        assert torch.all(torch.remainder(traj.t, 60.0) == 0.0)
    assert out[0].t.tolist() == [60.0, 120.0, 180.0]


def test_interpolate_at():
    a = TimestampedPoint("a", 0.0, 10.0, 0.0)
    b = TimestampedPoint("a", 2.0, 12.0, 120.0)
    assert interpolate_at(a, b, 60.0) == pytest.approx((1.0, 11.0))
    assert interpolate_at(a, b, 0.0) == (0.0, 10.0)


def test_online_cleaner_matches_batch():
    g = torch.Generator().manual_seed(5)
    n = 200
    steps = 300.0 * torch.rand(n, generator=g, dtype=torch.float64)
    steps[torch.rand(n, generator=g) < 0.05] += 4000.0
    steps[torch.rand(n, generator=g) < 0.2] = 0.0
    traj = north_track([60.0 * k for k in range(n)], torch.cumsum(steps, 0).tolist())

    cfg = PreprocessConfig()
    batch = remove_stop_points(filter_speed_outliers(traj, cfg.speed_max), cfg.stop_speed)
    cleaner = OnlineCleaner(cfg)
    online = [p.t for p in traj if cleaner.accept(p)]
    assert online == batch.t.tolist()
    assert cleaner.n_rejected == n - len(batch)


def test_online_cleaner_out_of_order():
    cleaner = OnlineCleaner(PreprocessConfig())
    assert cleaner.accept(TimestampedPoint("a", 25.0, 38.0, 60.0))
    assert not cleaner.accept(TimestampedPoint("a", 25.0, 38.0, 0.0))


def test_meter_conversion():
    lon, lat = to_degrees(0.0, 1852.0)
    assert lat - 38.0 == pytest.approx(math.degrees(1852.0 / EARTH_RADIUS))


def test_online_cleaner_rejects_antimeridian_crossing():
    cleaner = OnlineCleaner(PreprocessConfig())
    assert cleaner.accept(TimestampedPoint("a", 179.998, 0.0, 0.0))
    assert cleaner.accept(TimestampedPoint("a", 179.999, 0.0, 60.0))
    assert not cleaner.accept(TimestampedPoint("a", -179.9995, 0.0, 120.0))
    assert not cleaner.accept(TimestampedPoint("a", -179.998, 0.0, 180.0))
    assert cleaner.n_rejected == 2
    # Other objects are unaffected
    assert cleaner.accept(TimestampedPoint("b", -179.998, 0.0, 180.0))

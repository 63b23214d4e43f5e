import logging
import math
from dataclasses import dataclass
from typing import Iterable

import torch

from .config import ConfigurationError
from .geo import KNOT, TimestampedPoint, Trajectory, haversine_distance

logger = logging.getLogger(__name__)


@dataclass
class PreprocessConfig:
    """Cleansing thresholds (speeds in knots, times in seconds)."""

    speed_max: float = 50.0
    gap_dt: float = 1800.0
    stop_speed: float = 0.5
    align_rate: float = 60.0

    def __post_init__(self):
        for name in ("speed_max", "gap_dt", "stop_speed", "align_rate"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise ConfigurationError(f"{name} must be a finite number.")
            if value <= 0.0:
                raise ConfigurationError(f"{name} must be positive, got {value}.")
        if self.stop_speed >= self.speed_max:
            raise ConfigurationError("stop_speed must be smaller than speed_max.")


def filter_speed_outliers(traj: Trajectory, speed_max: float) -> Trajectory:
    """Drop points implying a speed above speed_max from the last kept point."""
    if len(traj) < 2:
        return traj
    v_max = speed_max * KNOT
    keep = [0]
    for i in range(1, len(traj)):
        j = keep[-1]
        d = haversine_distance(traj.point(j), traj.point(i))
        if d / float(traj.t[i] - traj.t[j]) <= v_max:
            keep.append(i)
    return traj[torch.tensor(keep)]


def remove_stop_points(traj: Trajectory, stop_speed: float) -> Trajectory:
    """Drop points slower than stop_speed relative to the last kept point."""
    if len(traj) < 2:
        return traj
    v_stop = stop_speed * KNOT
    keep = [0]
    for i in range(1, len(traj)):
        j = keep[-1]
        d = haversine_distance(traj.point(j), traj.point(i))
        if d / float(traj.t[i] - traj.t[j]) >= v_stop:
            keep.append(i)
    return traj[torch.tensor(keep)]


def segment_by_gap(traj: Trajectory, gap_dt: float) -> list[Trajectory]:
    """Split a trajectory wherever consecutive samples are more than gap_dt apart."""
    if len(traj) == 0:
        return []
    cuts = (torch.nonzero(torch.diff(traj.t) > gap_dt).ravel() + 1).tolist()
    bounds = [0, *cuts, len(traj)]
    return [traj[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def grid_epoch(t: float) -> float:
    """Stream start time truncated to a whole minute."""
    return math.floor(t / 60.0) * 60.0


def grid_times(t_first: float, t_last: float, align_rate: float, epoch: float):
    """Grid timestamps epoch + k * align_rate inside [t_first, t_last]."""
    k0 = math.ceil((t_first - epoch) / align_rate)
    k1 = math.floor((t_last - epoch) / align_rate)
    k = torch.arange(k0, k1 + 1, dtype=torch.float64)
    return epoch + k * align_rate


def align_linear(traj: Trajectory, align_rate: float, epoch: float) -> Trajectory:
    """Resample a trajectory onto the shared grid by linear interpolation."""
    if align_rate <= 0.0:
        raise ConfigurationError("align_rate must be positive.")
    if len(traj) < 2:
        return Trajectory.empty(traj.object_id)

    t = grid_times(float(traj.t[0]), float(traj.t[-1]), align_rate, epoch)
    # Bracketing samples
    i = torch.searchsorted(traj.t, t, right=True) - 1
    i = i.clamp(0, len(traj) - 2)
    w = (t - traj.t[i]) / (traj.t[i + 1] - traj.t[i])

    # lerp is exact at the knots
    lon = torch.lerp(traj.lon[i], traj.lon[i + 1], w)
    lat = torch.lerp(traj.lat[i], traj.lat[i + 1], w)
    return Trajectory(traj.object_id, t, lon, lat)


def split_contiguous(traj: Trajectory, align_rate: float) -> list[Trajectory]:
    """Split aligned data at grid holes (steps longer than align_rate)."""
    return segment_by_gap(traj, align_rate * (1.0 + 1e-9))


def preprocess_trajectory(
    traj: Trajectory, cfg: PreprocessConfig, epoch: float
) -> list[Trajectory]:
    """Speed filter, stop removal, gap segmentation and alignment, in that order."""
    cleaned = filter_speed_outliers(traj, cfg.speed_max)
    cleaned = remove_stop_points(cleaned, cfg.stop_speed)
    aligned = [
        align_linear(segment, cfg.align_rate, epoch)
        for segment in segment_by_gap(cleaned, cfg.gap_dt)
    ]
    return [a for a in aligned if len(a) > 0]


def preprocess_trajectories(
    trajectories: Iterable[Trajectory],
    cfg: PreprocessConfig,
    epoch: float | None = None,
) -> list[Trajectory]:
    """Run preprocess_trajectory over many objects on one shared grid."""
    trajectories = [t for t in trajectories if len(t) > 0]
    if not trajectories:
        return []
    if epoch is None:
        epoch = grid_epoch(min(float(t.t[0]) for t in trajectories))

    out = []
    n_raw = 0
    for traj in trajectories:
        n_raw += len(traj)
        out.extend(preprocess_trajectory(traj, cfg, epoch))
    logger.info(
        "Preprocessed %d raw points of %d objects into %d aligned segments",
        n_raw,
        len(trajectories),
        len(out),
    )
    return out


def interpolate_at(
    a: TimestampedPoint, b: TimestampedPoint, t: float
) -> tuple[float, float]:
    """Position at time t on the segment between two samples of one object."""
    if t == a.t:
        return a.lon, a.lat
    w = torch.tensor((t - a.t) / (b.t - a.t), dtype=torch.float64)
    ab = torch.tensor([[a.lon, a.lat], [b.lon, b.lat]], dtype=torch.float64)
    lon, lat = torch.lerp(ab[0], ab[1], w).tolist()
    return lon, lat


class OnlineCleaner:
    """Causal counterpart of the speed and stop filters for point streams.

    A point is accepted when the batch filters would have kept it given the
    same prefix of the object's trajectory.
    """

    def __init__(self, cfg: PreprocessConfig):
        self.cfg = cfg
        self._last_fast: dict[str, TimestampedPoint] = {}
        self._last_kept: dict[str, TimestampedPoint] = {}
        self.n_rejected = 0

    def _speed(self, a: TimestampedPoint, b: TimestampedPoint) -> float:
        return haversine_distance(a, b) / (b.t - a.t)

    def accept(self, p: TimestampedPoint) -> bool:
        prev = self._last_fast.get(p.object_id)
        if prev is not None:
            if p.t <= prev.t:
                logger.debug("Out-of-order point of %s at %s dropped", p.object_id, p.t)
                self.n_rejected += 1
                return False
            kept = self._last_kept.get(p.object_id)
            # Antimeridian crossings are not supported
            if kept is not None and abs(p.lon - kept.lon) > 180.0:
                logger.debug("Antimeridian crossing of %s at %s dropped", p.object_id, p.t)
                self.n_rejected += 1
                return False
            if self._speed(prev, p) > self.cfg.speed_max * KNOT:
                self.n_rejected += 1
                return False
        self._last_fast[p.object_id] = p

        kept = self._last_kept.get(p.object_id)
        if kept is not None and self._speed(kept, p) < self.cfg.stop_speed * KNOT:
            self.n_rejected += 1
            return False
        self._last_kept[p.object_id] = p
        return True

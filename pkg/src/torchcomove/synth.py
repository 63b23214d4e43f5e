import logging
import math
from dataclasses import dataclass, field

import pandas as pd
import torch
from torch import Tensor

from .config import ConfigurationError
from .evolving import MCS, EvolvingCluster
from .geo import EARTH_RADIUS

logger = logging.getLogger(__name__)

MOTIONS = ("linear", "arc", "random-walk")


@dataclass
class GroupSpec:
    """A scripted formation: `size` objects within `radius` meters of a leader.

    start and end are seconds after the scenario start.
    """

    size: int
    radius: float = 300.0
    start: float = 0.0
    end: float | None = None
    motion: str = "linear"


@dataclass
class SynthScenario:
    n_objects: int = 10
    duration: float = 3600.0
    sample_rate: float = 60.0
    groups: list[GroupSpec] = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0
    theta: float = 1500.0
    speed: float = 5.0
    heading: float = 90.0
    excursion: float = 2000.0
    origin: tuple[float, float] = (25.0, 38.0)
    t0: float = 1527897600.0

    def __post_init__(self):
        self.groups = [g if isinstance(g, GroupSpec) else GroupSpec(**g) for g in self.groups]
        self.origin = tuple(self.origin)
        for g in self.groups:
            if g.end is None:
                g.end = self.duration

        violations = []
        if self.n_objects < 0:
            violations.append("n_objects must be non-negative")
        if self.duration <= 0.0 or self.sample_rate <= 0.0:
            violations.append("duration and sample_rate must be positive")
        if self.noise_sigma < 0.0:
            violations.append("noise_sigma must be non-negative")
        if self.theta <= 0.0 or self.speed < 0.0 or self.excursion < 0.0:
            violations.append("theta must be positive, speed and excursion non-negative")
        n_grouped = sum(g.size for g in self.groups)
        if n_grouped > self.n_objects:
            violations.append(
                f"groups need {n_grouped} objects but n_objects is {self.n_objects}"
            )
        for i, g in enumerate(self.groups):
            if g.size < 2:
                violations.append(f"group {i} has fewer than 2 members")
            if not 0.0 < g.radius < self.theta / 2.0:
                violations.append(f"group {i} radius must lie in (0, theta/2)")
            if not 0.0 <= g.start < g.end <= self.duration:
                violations.append(f"group {i} window must satisfy 0 <= start < end <= duration")
            if g.motion not in MOTIONS:
                violations.append(f"group {i} motion '{g.motion}' not in {MOTIONS}")
        if violations:
            raise ConfigurationError("Invalid scenario: " + "; ".join(violations) + ".")

    @property
    def spacing(self) -> float:
        """Lattice spacing keeping separate units more than theta apart."""
        r = max((g.radius for g in self.groups), default=0.0)
        return self.theta + 2.0 * r + 2.0 * self.excursion + 10.0 * self.noise_sigma + 500.0


def _to_degrees(x: Tensor, y: Tensor, origin: tuple[float, float]) -> tuple[Tensor, Tensor]:
    lon0, lat0 = origin
    lat = lat0 + torch.rad2deg(y / EARTH_RADIUS)
    lon = lon0 + torch.rad2deg(x / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    return lon, lat


def _perturbation(
    motion: str, tau: Tensor, scenario: SynthScenario, generator: torch.Generator
) -> tuple[Tensor, Tensor]:
    """Offset of a unit from the common drift, bounded by the excursion."""
    a = scenario.excursion
    if motion == "arc":
        omega = 2.0 * math.pi / scenario.duration
        return a / 2.0 * torch.sin(omega * tau), a / 2.0 * (1.0 - torch.cos(omega * tau))
    if motion == "random-walk":
        sigma = 0.1 * scenario.speed * scenario.sample_rate
        steps = torch.randn(2, len(tau), generator=generator, dtype=torch.float64) * sigma
        steps[:, 0] = 0.0
        walk = torch.cumsum(steps, dim=1).clamp(-a / 2.0, a / 2.0)
        return walk[0], walk[1]
    return torch.zeros_like(tau), torch.zeros_like(tau)


def generate(scenario: SynthScenario) -> tuple[pd.DataFrame, list[EvolvingCluster]]:
    """Sample a fleet and the scripted groups it contains.

    Loners and group leaders sit on a square lattice and drift with a common
    velocity, so only the scripted groups are ever within theta of each other.
    """
    generator = torch.Generator().manual_seed(scenario.seed)
    n_steps = int(math.floor(scenario.duration / scenario.sample_rate + 1e-9)) + 1
    tau = torch.arange(n_steps, dtype=torch.float64) * scenario.sample_rate

    heading = math.radians(scenario.heading)
    drift_x = scenario.speed * math.sin(heading) * tau
    drift_y = scenario.speed * math.cos(heading) * tau

    ids = [f"obj{i:03d}" for i in range(scenario.n_objects)]
    n_grouped = sum(g.size for g in scenario.groups)
    n_units = len(scenario.groups) + scenario.n_objects - n_grouped
    side = max(1, math.ceil(math.sqrt(n_units)))
    slots = torch.randperm(n_units, generator=generator).tolist()

    def slot_xy(unit: int) -> tuple[float, float]:
        row, col = divmod(slots[unit], side)
        return col * scenario.spacing, row * scenario.spacing

    frames = []
    truth = []

    def emit(object_id: str, x: Tensor, y: Tensor, mask: Tensor):
        if scenario.noise_sigma > 0.0:
            noise = torch.randn(2, len(x), generator=generator, dtype=torch.float64)
            x = x + scenario.noise_sigma * noise[0]
            y = y + scenario.noise_sigma * noise[1]
        lon, lat = _to_degrees(x[mask], y[mask], scenario.origin)
        frames.append(
            pd.DataFrame(
                {
                    "object_id": object_id,
                    "t": (scenario.t0 + tau[mask]).numpy(),
                    "lon": lon.numpy(),
                    "lat": lat.numpy(),
                }
            )
        )

    next_id = 0
    for unit, g in enumerate(scenario.groups):
        x0, y0 = slot_xy(unit)
        px, py = _perturbation(g.motion, tau - g.start, scenario, generator)
        mask = (tau >= g.start - 1e-9) & (tau <= g.end + 1e-9)
        members = ids[next_id : next_id + g.size]
        next_id += g.size

        # Members on a circle around the leader, the leader at its center
        for k, object_id in enumerate(members):
            angle = 2.0 * math.pi * k / g.size
            r = 0.0 if k == 0 else g.radius
            x = x0 + drift_x + px + r * math.cos(angle)
            y = y0 + drift_y + py + r * math.sin(angle)
            emit(object_id, x, y, mask)
        times = scenario.t0 + tau[mask]
        truth.append(EvolvingCluster(tuple(members), float(times[0]), float(times[-1]), MCS))

    for unit, object_id in enumerate(ids[next_id:], start=len(scenario.groups)):
        x0, y0 = slot_xy(unit)
        emit(object_id, x0 + drift_x, y0 + drift_y, torch.ones(n_steps, dtype=torch.bool))

    if frames:
        df = pd.concat(frames, ignore_index=True)
        df = df.sort_values(["t", "object_id"], kind="stable").reset_index(drop=True)
    else:
        df = pd.DataFrame(columns=["object_id", "t", "lon", "lat"])
    logger.info(
        "Generated %d records of %d objects with %d scripted groups",
        len(df),
        scenario.n_objects,
        len(truth),
    )
    return df, sorted(truth, key=lambda e: (e.members, e.t_start))

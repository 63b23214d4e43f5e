from dataclasses import dataclass
from math import isfinite
from typing import Iterable, Iterator, Sequence

import torch
from torch import Tensor

EARTH_RADIUS = 6_371_000.0  # m
KNOT = 0.514444  # m/s


@dataclass(frozen=True)
class TimestampedPoint:
    object_id: str
    lon: float
    lat: float
    t: float

    def __post_init__(self):
        if not (isfinite(self.lon) and isfinite(self.lat) and isfinite(self.t)):
            raise ValueError("Point coordinates and timestamp must be finite.")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"Longitude {self.lon} outside [-180, 180].")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Latitude {self.lat} outside [-90, 90].")


class Trajectory:
    """Time-ordered positions of a single moving object.

    Columns are stored as float64 tensors so that filters, alignment and feature
    extraction operate on whole trajectories at once.
    """

    def __init__(self, object_id: str, t: Tensor, lon: Tensor, lat: Tensor):
        self.object_id = object_id
        self.t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        self.lon = torch.as_tensor(lon, dtype=torch.float64).reshape(-1)
        self.lat = torch.as_tensor(lat, dtype=torch.float64).reshape(-1)

        if not (len(self.t) == len(self.lon) == len(self.lat)):
            raise ValueError("Trajectory columns must have equal length.")
        if len(self.t) == 0:
            return
        if not (
            torch.isfinite(self.t).all()
            and torch.isfinite(self.lon).all()
            and torch.isfinite(self.lat).all()
        ):
            raise ValueError("Trajectory values must be finite.")
        if (self.lon.abs() > 180.0).any() or (self.lat.abs() > 90.0).any():
            raise ValueError("Trajectory coordinates out of range.")
        if (torch.diff(self.t) <= 0.0).any():
            raise ValueError("Trajectory timestamps must be strictly increasing.")
        # Antimeridian crossings are not supported
        if (torch.diff(self.lon).abs() > 180.0).any():
            raise ValueError(
                f"Trajectory of {object_id} crosses the antimeridian."
            )

    @classmethod
    def from_points(cls, points: Sequence[TimestampedPoint]) -> "Trajectory":
        if len(points) == 0:
            raise ValueError("Cannot infer the object of an empty point list.")
        object_id = points[0].object_id
        if any(p.object_id != object_id for p in points):
            raise ValueError("All points of a trajectory must share the object id.")
        return cls(
            object_id,
            torch.tensor([p.t for p in points], dtype=torch.float64),
            torch.tensor([p.lon for p in points], dtype=torch.float64),
            torch.tensor([p.lat for p in points], dtype=torch.float64),
        )

    @classmethod
    def empty(cls, object_id: str) -> "Trajectory":
        z = torch.zeros(0, dtype=torch.float64)
        return cls(object_id, z, z, z)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, index) -> "Trajectory":
        """Sub-trajectory selected by slice, index tensor or boolean mask."""
        if isinstance(index, int):
            index = slice(index, index + 1 if index != -1 else None)
        return Trajectory(self.object_id, self.t[index], self.lon[index], self.lat[index])

    def __iter__(self) -> Iterator[TimestampedPoint]:
        return iter(self.points)

    def __repr__(self) -> str:
        return f"Trajectory({self.object_id!r}, n={len(self)})"

    @property
    def points(self) -> list[TimestampedPoint]:
        return [
            TimestampedPoint(self.object_id, float(x), float(y), float(t))
            for t, x, y in zip(self.t.tolist(), self.lon.tolist(), self.lat.tolist())
        ]

    def point(self, i: int) -> TimestampedPoint:
        return TimestampedPoint(
            self.object_id, float(self.lon[i]), float(self.lat[i]), float(self.t[i])
        )

    def speeds(self) -> Tensor:
        """Speed between consecutive points in m/s."""
        d = haversine(self.lon[:-1], self.lat[:-1], self.lon[1:], self.lat[1:])
        return d / torch.diff(self.t)


@dataclass(frozen=True)
class Mbr:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if self.lon_min > self.lon_max or self.lat_min > self.lat_max:
            raise ValueError("Mbr bounds must satisfy min <= max.")

    @property
    def area(self) -> float:
        return (self.lon_max - self.lon_min) * (self.lat_max - self.lat_min)

    @property
    def corners(self) -> list[tuple[float, float]]:
        return [
            (self.lon_min, self.lat_min),
            (self.lon_max, self.lat_min),
            (self.lon_max, self.lat_max),
            (self.lon_min, self.lat_max),
        ]

    def contains(self, lon: float, lat: float) -> bool:
        return (
            self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max
        )

    def intersection_area(self, other: "Mbr") -> float:
        w = min(self.lon_max, other.lon_max) - max(self.lon_min, other.lon_min)
        h = min(self.lat_max, other.lat_max) - max(self.lat_min, other.lat_min)
        if w <= 0.0 or h <= 0.0:
            return 0.0
        return w * h

    def union(self, other: "Mbr") -> "Mbr":
        """Smallest box containing both boxes."""
        return Mbr(
            min(self.lon_min, other.lon_min),
            max(self.lon_max, other.lon_max),
            min(self.lat_min, other.lat_min),
            max(self.lat_max, other.lat_max),
        )


@dataclass(frozen=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("TimeInterval requires start <= end.")

    @property
    def length(self) -> float:
        return self.end - self.start


def haversine(lon1: Tensor, lat1: Tensor, lon2: Tensor, lat2: Tensor) -> Tensor:
    """Great-circle distance in meters between broadcastable coordinate tensors."""
    lon1, lat1, lon2, lat2 = (
        torch.deg2rad(torch.as_tensor(v, dtype=torch.float64))
        for v in (lon1, lat1, lon2, lat2)
    )
    a = (
        torch.sin(0.5 * (lat2 - lat1)) ** 2
        + torch.cos(lat1) * torch.cos(lat2) * torch.sin(0.5 * (lon2 - lon1)) ** 2
    )
    return 2.0 * EARTH_RADIUS * torch.asin(torch.sqrt(a.clamp(0.0, 1.0)))


def pairwise_haversine(lon: Tensor, lat: Tensor) -> Tensor:
    """All-pairs distance matrix in meters."""
    return haversine(lon[:, None], lat[:, None], lon[None, :], lat[None, :])


def haversine_distance(a: TimestampedPoint, b: TimestampedPoint) -> float:
    return float(haversine(a.lon, a.lat, b.lon, b.lat))


def mbr_of_coords(lon: Tensor, lat: Tensor) -> Mbr:
    if lon.numel() == 0:
        raise ValueError("empty geometry")
    return Mbr(
        float(lon.min()), float(lon.max()), float(lat.min()), float(lat.max())
    )


def mbr_of_points(points: Iterable[TimestampedPoint | tuple[float, float]]) -> Mbr:
    """Smallest lon/lat box containing all points (points or (lon, lat) pairs)."""
    coords = [(p.lon, p.lat) if isinstance(p, TimestampedPoint) else p for p in points]
    if not coords:
        raise ValueError("empty geometry")
    xy = torch.tensor(coords, dtype=torch.float64)
    return mbr_of_coords(xy[:, 0], xy[:, 1])


def mbr_iou(a: Mbr, b: Mbr) -> float:
    """Intersection over union of two boxes in squared degrees."""
    if a.area == 0.0 or b.area == 0.0:
        # Degenerate boxes have no area to compare
        if a.area == 0.0 and b.area == 0.0:
            return 1.0 if a == b else 0.0
        return 0.0
    inter = a.intersection_area(b)
    return inter / (a.area + b.area - inter)


def interval_iou(a: TimeInterval, b: TimeInterval) -> float:
    """Overlap over total covered length of two time intervals."""
    overlap = min(a.end, b.end) - max(a.start, b.start)
    if a.length == 0.0 and b.length == 0.0:
        return 1.0 if a == b else 0.0
    if overlap <= 0.0:
        return 0.0
    return overlap / (a.length + b.length - overlap)

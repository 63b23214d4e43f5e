import math

import pandas as pd
import pytest

from torchcomove.evolving import MC, MCS, EvolvingCluster, TimeSlice
from torchcomove.flp import Predictor
from torchcomove.geo import EARTH_RADIUS, TimestampedPoint, Trajectory
from torchcomove.synth import GroupSpec, SynthScenario, generate

ORIGIN = (25.0, 38.0)
RATE = 60.0


def to_degrees(x: float, y: float, origin=ORIGIN) -> tuple[float, float]:
    """Local east/north offsets in meters to lon/lat degrees."""
    lon0, lat0 = origin
    lat = lat0 + math.degrees(y / EARTH_RADIUS)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    return lon, lat


# Nine objects over six slices. Slices 1-3: a,b,c and b,c,d,e are cliques,
# g,h,i a third one and f bridges e to g. Slice 4: f leaves. Slice 5: d and e
# drift off the b,c clique and f joins g,h,i elsewhere. Slice 6: a leaves.
_BASE = {
    "a": (-1000.0, 500.0),
    "b": (0.0, 0.0),
    "c": (0.0, 1000.0),
    "d": (1000.0, 0.0),
    "e": (1000.0, 1000.0),
    "f": (2400.0, 1000.0),
    "g": (3800.0, 1000.0),
    "h": (4800.0, 1000.0),
    "i": (4300.0, 1800.0),
}
_LATE = {
    "a": (-1000.0, 500.0),
    "b": (0.0, 0.0),
    "c": (0.0, 1000.0),
    "d": (1300.0, 1200.0),
    "e": (2300.0, 1200.0),
    "f": (10000.0, 0.0),
    "g": (11000.0, 0.0),
    "h": (10000.0, 1000.0),
    "i": (11000.0, 1000.0),
}
WALKTHROUGH_LAYOUT = [
    _BASE,
    _BASE,
    _BASE,
    {**_BASE, "f": (2400.0, 4000.0)},
    _LATE,
    {**_LATE, "a": (-5000.0, 500.0)},
]


def ts(k: int) -> float:
    return RATE * k


# The published walkthrough ends the bcde MCS and the ghi MC at slice 5; both
# survive into slice 6 under intersection maintenance, so 6 is expected here.
WALKTHROUGH_EXPECTED = sorted(
    [
        EvolvingCluster(tuple("bcde"), ts(1), ts(4), MC),
        EvolvingCluster(tuple("abc"), ts(1), ts(5), MC),
        EvolvingCluster(tuple("ghi"), ts(1), ts(6), MC),
        EvolvingCluster(tuple("fghi"), ts(5), ts(6), MC),
        EvolvingCluster(tuple("abcdefghi"), ts(1), ts(3), MCS),
        EvolvingCluster(tuple("abcde"), ts(1), ts(5), MCS),
        EvolvingCluster(tuple("bcde"), ts(1), ts(6), MCS),
        EvolvingCluster(tuple("ghi"), ts(1), ts(6), MCS),
        EvolvingCluster(tuple("fghi"), ts(5), ts(6), MCS),
    ],
    key=lambda e: e.key,
)


@pytest.fixture
def walkthrough_slices() -> list[TimeSlice]:
    return [
        TimeSlice(ts(k + 1), {o: to_degrees(*xy) for o, xy in layout.items()})
        for k, layout in enumerate(WALKTHROUGH_LAYOUT)
    ]


class IdentityPredictor(Predictor):
    """Returns the recorded position of the object at the target time.

    Past the end of the data the last known position is returned.
    """

    def __init__(self, df: pd.DataFrame):
        self.truth = {
            (str(o), float(t)): (float(x), float(y))
            for o, t, x, y in df[["object_id", "t", "lon", "lat"]].itertuples(index=False)
        }

    def predict(self, traj: Trajectory, horizon: float) -> TimestampedPoint:
        t = float(traj.t[-1]) + horizon
        last = (float(traj.lon[-1]), float(traj.lat[-1]))
        lon, lat = self.truth.get((traj.object_id, t), last)
        return TimestampedPoint(traj.object_id, lon, lat, t)


@pytest.fixture
def lockstep_fleet():
    """Three objects moving together for an hour."""
    scenario = SynthScenario(n_objects=3, duration=3600.0, groups=[GroupSpec(3, radius=200.0)])
    return generate(scenario)


@pytest.fixture
def mixed_fleet():
    """Two convoys and four loners, every object present throughout."""
    scenario = SynthScenario(
        n_objects=10,
        duration=3600.0,
        groups=[GroupSpec(3, radius=300.0), GroupSpec(3, radius=250.0, motion="arc")],
        seed=7,
    )
    return generate(scenario)

import logging
from dataclasses import dataclass, field, replace
from os import PathLike
from typing import Iterable, Mapping, Sequence

import matplotlib.pyplot as plt
import torch

from .config import ConfigurationError
from .evolving import EvolvingCluster, TimeSlice
from .geo import Mbr, TimeInterval, interval_iou, mbr_iou, mbr_of_points

logger = logging.getLogger(__name__)

MEASURES = ("sim_spatial", "sim_temporal", "sim_member", "sim_star")


@dataclass(frozen=True)
class SimWeights:
    """Weights of the spatial, temporal and membership similarities."""

    lambda1: float = 1.0 / 3.0
    lambda2: float = 1.0 / 3.0
    lambda3: float = 1.0 / 3.0

    def __post_init__(self):
        weights = (self.lambda1, self.lambda2, self.lambda3)
        if not all(0.0 < w < 1.0 for w in weights):
            raise ConfigurationError("Similarity weights must each lie in (0, 1).")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"Similarity weights must sum to 1, got {sum(weights):.12g}."
            )

    @classmethod
    def parse(cls, text: str) -> "SimWeights":
        """Weights from a comma-separated string 'l1,l2,l3'."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ConfigurationError("Expected three comma-separated weights.")
        try:
            values = [_fraction(p) for p in parts]
        except ValueError:
            raise ConfigurationError(f"Cannot parse weights '{text}'.") from None
        return cls(*values)


def _fraction(text: str) -> float:
    """Parse '0.25' or '1/3'."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


@dataclass(frozen=True)
class MatchPair:
    predicted: EvolvingCluster
    actual: EvolvingCluster
    sim_spatial: float
    sim_temporal: float
    sim_member: float
    sim_star: float


@dataclass
class MatchReport:
    pairs: list[MatchPair] = field(default_factory=list)
    unmatched_predicted: list[EvolvingCluster] = field(default_factory=list)

    def values(self, measure: str) -> list[float]:
        return [getattr(p, measure) for p in self.pairs]


@dataclass(frozen=True)
class Summary:
    count: int
    min: float
    q25: float
    median: float
    q75: float
    mean: float
    max: float


def locate(
    clusters: Iterable[EvolvingCluster],
    slices: Sequence[TimeSlice] | Mapping[float, TimeSlice],
) -> list[EvolvingCluster]:
    """Attach per-timeslice member bounding boxes to every cluster."""
    if not isinstance(slices, Mapping):
        slices = {ts.t: ts for ts in slices}
    times = sorted(slices)
    located = []
    for cluster in clusters:
        footprint = []
        for t in times:
            if t < cluster.t_start or t > cluster.t_end:
                continue
            positions = slices[t].positions
            coords = []
            for m in cluster.members:
                if m not in positions:
                    raise ValueError(f"missing position of {m} at {t}")
                coords.append(positions[m])
            footprint.append((t, mbr_of_points(coords)))
        if not footprint:
            raise ValueError(
                f"No timeslice covers cluster {cluster.members} "
                f"[{cluster.t_start}, {cluster.t_end}]."
            )
        located.append(replace(cluster, footprint=tuple(footprint)))
    return located


def lifetime_mbr(cluster: EvolvingCluster) -> Mbr:
    if not cluster.footprint:
        raise ValueError(f"Cluster {cluster.members} has no footprint; call locate().")
    box = cluster.footprint[0][1]
    for _, other in cluster.footprint[1:]:
        box = box.union(other)
    return box


def sim_spatial(
    pred: EvolvingCluster, act: EvolvingCluster, per_slice: bool = False
) -> float:
    """IoU of the lifetime bounding boxes, or mean IoU over shared timeslices."""
    if not per_slice:
        return mbr_iou(lifetime_mbr(pred), lifetime_mbr(act))
    if not pred.footprint or not act.footprint:
        raise ValueError("Clusters have no footprint; call locate().")
    boxes = dict(act.footprint)
    ious = [mbr_iou(box, boxes[t]) for t, box in pred.footprint if t in boxes]
    return sum(ious) / len(ious) if ious else 0.0


def sim_temporal(pred: EvolvingCluster, act: EvolvingCluster) -> float:
    return interval_iou(
        TimeInterval(pred.t_start, pred.t_end), TimeInterval(act.t_start, act.t_end)
    )


def sim_member(pred: EvolvingCluster, act: EvolvingCluster) -> float:
    a, b = set(pred.members), set(act.members)
    return len(a & b) / len(a | b)


def _similarities(pred, act, w: SimWeights, per_slice: bool) -> tuple[float, ...]:
    temporal = sim_temporal(pred, act)
    if temporal <= 0.0:
        # Disjoint lifetimes are not compared
        return 0.0, temporal, sim_member(pred, act), 0.0
    spatial = sim_spatial(pred, act, per_slice)
    member = sim_member(pred, act)
    star = w.lambda1 * spatial + w.lambda2 * temporal + w.lambda3 * member
    return spatial, temporal, member, min(1.0, star)


def sim_overall(
    pred: EvolvingCluster,
    act: EvolvingCluster,
    w: SimWeights = SimWeights(),
    per_slice: bool = False,
) -> float:
    """Weighted similarity, zero when the lifetimes do not overlap."""
    return _similarities(pred, act, w, per_slice)[3]


def cluster_matching(
    predicted: Iterable[EvolvingCluster],
    actual: Iterable[EvolvingCluster],
    w: SimWeights = SimWeights(),
    per_slice: bool = False,
) -> MatchReport:
    """Best actual cluster of the same type for every predicted cluster."""
    actual = sorted(actual, key=lambda e: (e.t_start, e.members, e.t_end))
    by_type: dict[int, list[EvolvingCluster]] = {}
    for a in actual:
        by_type.setdefault(a.tp, []).append(a)

    report = MatchReport()
    for p in sorted(predicted, key=lambda e: (e.tp, e.members, e.t_start, e.t_end)):
        best, best_sims = None, None
        for a in by_type.get(p.tp, []):
            sims = _similarities(p, a, w, per_slice)
            # Candidates are ordered by start time then members, so ties keep the first
            if best_sims is None or sims[3] > best_sims[3]:
                best, best_sims = a, sims
        if best is None or best_sims[3] <= 0.0:
            report.unmatched_predicted.append(p)
        else:
            report.pairs.append(MatchPair(p, best, *best_sims))
    logger.info(
        "Matched %d predicted clusters, %d unmatched",
        len(report.pairs),
        len(report.unmatched_predicted),
    )
    return report


def summarize_values(values: Sequence[float]) -> Summary | None:
    """Order statistics with linear interpolation between ranks."""
    if len(values) == 0:
        return None
    x = torch.tensor(values, dtype=torch.float64)
    q = torch.quantile(x, torch.tensor([0.25, 0.5, 0.75], dtype=torch.float64))
    return Summary(
        count=len(values),
        min=float(x.min()),
        q25=float(q[0]),
        median=float(q[1]),
        q75=float(q[2]),
        mean=float(x.mean()),
        max=float(x.max()),
    )


def summarize(report: MatchReport) -> dict[str, Summary | None]:
    return {m: summarize_values(report.values(m)) for m in MEASURES}


@torch.no_grad()
def plot_similarity(
    report: MatchReport,
    filename: str | PathLike | None = None,
    title: str | None = None,
    ax: plt.Axes | None = None,
):
    """Box plot of the four similarity measures over all matched pairs."""
    if ax is None:
        _, ax = plt.subplots(figsize=(6.0, 4.0))
    data = [report.values(m) for m in MEASURES]
    ax.boxplot(data)
    ax.set_xticks([1, 2, 3, 4], ["spatial", "temporal", "member", "overall"])
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("similarity")
    if title:
        ax.set_title(title)
    if filename is not None:
        ax.figure.savefig(filename, bbox_inches="tight")
        plt.close(ax.figure)
    return ax

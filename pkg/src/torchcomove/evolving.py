import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import torch
from scipy.sparse import csr_array
from scipy.sparse.csgraph import connected_components
from torch import Tensor

from .config import CliqueLimitError, ConfigurationError
from .geo import Mbr, TimestampedPoint, pairwise_haversine

logger = logging.getLogger(__name__)

MC = 1
MCS = 2


class Mode(str, Enum):
    MC = "mc"
    MCS = "mcs"
    BOTH = "both"

    @property
    def kinds(self) -> tuple[int, ...]:
        return {"mc": (MC,), "mcs": (MCS,), "both": (MC, MCS)}[self.value]


@dataclass
class TimeSlice:
    t: float
    positions: dict[str, tuple[float, float]]


@dataclass
class DetectionParams:
    """Thresholds of evolving cluster detection.

    c is the minimum cardinality, theta the distance threshold in meters and d
    the minimum duration in consecutive timeslices. With align_rate set, a
    missing grid slice terminates every active pattern.
    """

    c: int = 3
    theta: float = 1500.0
    d: int = 3
    mode: Mode | str = Mode.BOTH
    align_rate: float | None = 60.0
    max_cliques: int = 1_000_000
    progressive: bool = False

    def __post_init__(self):
        try:
            self.mode = Mode(str(getattr(self.mode, "value", self.mode)).lower())
        except ValueError:
            raise ConfigurationError(f"Unknown detection mode '{self.mode}'.") from None
        if int(self.c) < 2:
            raise ConfigurationError("c must be at least 2.")
        if not self.theta > 0.0:
            raise ConfigurationError("theta must be positive.")
        if int(self.d) < 1:
            raise ConfigurationError("d must be at least 1.")
        if self.align_rate is not None and not self.align_rate > 0.0:
            raise ConfigurationError("align_rate must be positive.")
        if int(self.max_cliques) < 1:
            raise ConfigurationError("max_cliques must be positive.")


@dataclass(frozen=True)
class EvolvingCluster:
    members: tuple[str, ...]
    t_start: float
    t_end: float
    tp: int
    provisional: bool = False
    footprint: tuple[tuple[float, Mbr], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(self.members)))
        if self.tp not in (MC, MCS):
            raise ValueError(f"Cluster type must be 1 (MC) or 2 (MCS), got {self.tp}.")
        if self.t_start > self.t_end:
            raise ValueError("Cluster t_start must not exceed t_end.")

    @property
    def key(self) -> tuple:
        return (self.members, self.t_start, self.t_end, self.tp)


@dataclass(frozen=True)
class ActivePattern:
    members: frozenset[str]
    t_start: float
    last_seen: float
    tp: int
    n_slices: int = 1

    def to_cluster(self, provisional: bool = False) -> EvolvingCluster:
        return EvolvingCluster(
            tuple(self.members), self.t_start, self.last_seen, self.tp, provisional
        )


class ProximityGraph(NamedTuple):
    nodes: tuple[str, ...]
    adjacency: Tensor

    def neighbors(self) -> list[set[int]]:
        return [set(torch.nonzero(row).ravel().tolist()) for row in self.adjacency]


class Components(NamedTuple):
    mc: list[tuple[str, ...]]
    mcs: list[tuple[str, ...]]


def build_proximity_graph(ts: TimeSlice, theta: float) -> ProximityGraph:
    """Edge between every pair of objects at most theta meters apart."""
    nodes = tuple(sorted(ts.positions))
    if not nodes:
        return ProximityGraph(nodes, torch.zeros((0, 0), dtype=torch.bool))
    xy = torch.tensor([ts.positions[n] for n in nodes], dtype=torch.float64)
    adjacency = pairwise_haversine(xy[:, 0], xy[:, 1]) <= theta
    adjacency.fill_diagonal_(False)
    return ProximityGraph(nodes, adjacency)


def component_labels(graph: ProximityGraph):
    """Connected component label of every node."""
    _, labels = connected_components(
        csr_array(graph.adjacency.to(torch.float64).numpy()), directed=False
    )
    return labels


def _connected_components(graph: ProximityGraph, c: int) -> list[frozenset[int]]:
    if len(graph.nodes) == 0:
        return []
    labels = component_labels(graph)
    groups: dict[int, set[int]] = {}
    for i, label in enumerate(labels.tolist()):
        groups.setdefault(label, set()).add(i)
    return [frozenset(g) for g in groups.values() if len(g) >= c]


def _degeneracy_order(adj: list[set[int]], vertices: set[int]) -> list[int]:
    degree = {v: len(adj[v]) for v in vertices}
    order = []
    remaining = set(degree)
    while remaining:
        v = min(remaining, key=lambda u: (degree[u], u))
        order.append(v)
        remaining.remove(v)
        for u in adj[v]:
            if u in remaining:
                degree[u] -= 1
    return order


def _maximal_cliques(adj: list[set[int]], c: int, limit: int) -> list[frozenset[int]]:
    """Bron-Kerbosch with pivoting over a degeneracy ordering."""
    cliques: list[frozenset[int]] = []

    def expand(R: set[int], P: set[int], X: set[int]):
        if len(R) + len(P) < c:
            return
        if not P:
            if not X:
                cliques.append(frozenset(R))
                if len(cliques) > limit:
                    raise CliqueLimitError(
                        f"Clique enumeration exceeded the limit of {limit} cliques."
                    )
            return
        pivot = max(P | X, key=lambda u: len(adj[u] & P))
        for v in sorted(P - adj[pivot]):
            expand(R | {v}, P & adj[v], X & adj[v])
            P = P - {v}
            X = X | {v}

    # Vertices of degree below c - 1 lie in no clique of size c
    keep = {v for v in range(len(adj)) if len(adj[v]) >= c - 1}
    adj = [adj[v] & keep if v in keep else set() for v in range(len(adj))]

    done: set[int] = set()
    for v in _degeneracy_order(adj, keep):
        later = adj[v] - done
        expand({v}, later, adj[v] & done)
        done.add(v)
    return cliques


def maximal_components(
    graph: ProximityGraph,
    c: int,
    kinds: Iterable[int] = (MC, MCS),
    max_cliques: int = 1_000_000,
) -> Components:
    """Maximal cliques and connected components with at least c vertices."""
    kinds = set(kinds)
    mc, mcs = [], []
    if MCS in kinds:
        mcs = [
            tuple(graph.nodes[i] for i in sorted(g))
            for g in _connected_components(graph, c)
        ]
    if MC in kinds and len(graph.nodes) >= c:
        mc = [
            tuple(graph.nodes[i] for i in sorted(g))
            for g in _maximal_cliques(graph.neighbors(), c, max_cliques)
        ]
    return Components(sorted(mc), sorted(mcs))


def _canonical(clusters: Iterable[EvolvingCluster]) -> list[EvolvingCluster]:
    return sorted(clusters, key=lambda e: (e.members, e.t_start, e.t_end, e.tp))


class EvolvingClusters:
    """Online evolving cluster detector for one stream of timeslices."""

    def __init__(self, params: DetectionParams):
        self.params = params
        self.t_prev: float | None = None
        self._active: dict[int, list[ActivePattern]] = {k: [] for k in params.mode.kinds}

    def active_patterns(self) -> list[ActivePattern]:
        return sorted(
            (p for patterns in self._active.values() for p in patterns),
            key=lambda p: (p.tp, tuple(sorted(p.members)), p.t_start),
        )

    def _eligible(self, patterns: Iterable[ActivePattern]) -> list[EvolvingCluster]:
        return [p.to_cluster() for p in patterns if p.n_slices >= self.params.d]

    def step(self, ts: TimeSlice) -> list[EvolvingCluster]:
        """Advance by one timeslice and return the clusters that ended before it."""
        if self.t_prev is not None and ts.t <= self.t_prev:
            raise ValueError("non-monotonic time")

        emitted: list[EvolvingCluster] = []
        rate = self.params.align_rate
        if (
            self.t_prev is not None
            and rate is not None
            and ts.t - self.t_prev > rate * (1.0 + 1e-9)
        ):
            logger.debug("Gap before %s terminates all active patterns", ts.t)
            emitted += self.flush()
        self.t_prev = ts.t

        graph = build_proximity_graph(ts, self.params.theta)
        groups = maximal_components(
            graph, self.params.c, self.params.mode.kinds, self.params.max_cliques
        )
        for tp, found in ((MC, groups.mc), (MCS, groups.mcs)):
            if tp not in self._active:
                continue
            old = self._active[tp]
            new = self._advance(old, [frozenset(g) for g in found], ts.t, tp)

            # Old patterns not carried on by a pattern at least as old have ended
            for p in old:
                if not any(
                    q.members >= p.members and q.t_start <= p.t_start for q in new
                ):
                    if p.n_slices >= self.params.d:
                        emitted.append(p.to_cluster())

            if self.params.progressive:
                emitted += [
                    q.to_cluster(provisional=True)
                    for q in new
                    if q.n_slices == self.params.d
                ]
            self._active[tp] = new

        logger.debug(
            "Slice %s: %d MC, %d MCS, %d emitted",
            ts.t,
            len(groups.mc),
            len(groups.mcs),
            len(emitted),
        )
        return _canonical(emitted)

    def _advance(
        self, old: list[ActivePattern], groups: list[frozenset[str]], t: float, tp: int
    ) -> list[ActivePattern]:
        c = self.params.c
        candidates: dict[frozenset[str], ActivePattern] = {}

        def offer(p: ActivePattern):
            current = candidates.get(p.members)
            if current is None or p.t_start < current.t_start:
                candidates[p.members] = p

        # Continuations keep their start time
        for p in old:
            for g in groups:
                common = p.members & g
                if len(common) >= c:
                    offer(ActivePattern(common, p.t_start, t, tp, p.n_slices + 1))
        for g in groups:
            offer(ActivePattern(g, t, t, tp, 1))

        # Drop strict subsets of a concurrent pattern with the same start
        kept = [
            p
            for p in candidates.values()
            if not any(
                q.t_start == p.t_start and q.members > p.members
                for q in candidates.values()
            )
        ]
        return sorted(kept, key=lambda p: (tuple(sorted(p.members)), p.t_start))

    def flush(self) -> list[EvolvingCluster]:
        """Emit every still-active eligible pattern and reset the state."""
        emitted = []
        for tp in self._active:
            emitted += self._eligible(self._active[tp])
            self._active[tp] = []
        return _canonical(emitted)


def detect(slices: Iterable[TimeSlice], params: DetectionParams) -> list[EvolvingCluster]:
    """Run the detector over a whole batch of timeslices."""
    detector = EvolvingClusters(params)
    clusters = []
    for ts in slices:
        clusters += detector.step(ts)
    clusters += detector.flush()
    return clusters


def slices_from_points(
    points: Iterable[TimestampedPoint], grid: Sequence[float] | None = None
) -> list[TimeSlice]:
    """Group aligned points into timeslices, optionally over a full grid.

    With a grid, timestamps without any point produce empty slices.
    """
    by_t: dict[float, dict[str, tuple[float, float]]] = {}
    for p in points:
        positions = by_t.setdefault(p.t, {})
        if p.object_id in positions:
            raise ValueError(f"Duplicate position of {p.object_id} at {p.t}.")
        positions[p.object_id] = (p.lon, p.lat)
    if grid is not None:
        for t in grid:
            by_t.setdefault(float(t), {})
    return [TimeSlice(t, by_t[t]) for t in sorted(by_t)]


def check_cluster(
    cluster: EvolvingCluster,
    slices: Sequence[TimeSlice] | Mapping[float, TimeSlice],
    params: DetectionParams,
) -> list[str]:
    """Violations of the evolving cluster definition, empty when valid."""
    if not isinstance(slices, Mapping):
        slices = {ts.t: ts for ts in slices}
    violations = []
    members = cluster.members
    if len(members) < params.c:
        violations.append(f"{members} has fewer than {params.c} members")

    times = sorted(t for t in slices if cluster.t_start <= t <= cluster.t_end)
    if params.align_rate is not None:
        n_expected = round((cluster.t_end - cluster.t_start) / params.align_rate) + 1
        if len(times) != n_expected:
            violations.append(
                f"{members} spans {n_expected} grid slices but {len(times)} exist"
            )
    if len(times) < params.d:
        violations.append(f"{members} lasts {len(times)} slices, fewer than {params.d}")

    for t in times:
        ts = slices[t]
        missing = [m for m in members if m not in ts.positions]
        if missing:
            violations.append(f"{missing} absent at {t}")
            continue
        graph = build_proximity_graph(ts, params.theta)
        index = {n: i for i, n in enumerate(graph.nodes)}
        idx = torch.tensor([index[m] for m in members])
        if cluster.tp == MC:
            sub = graph.adjacency[idx][:, idx]
            sub = sub | torch.eye(len(idx), dtype=torch.bool)
            if not sub.all():
                violations.append(f"{members} is not a clique at {t}")
        else:
            labels = component_labels(graph)
            if len(set(labels[idx.numpy()].tolist())) != 1:
                violations.append(f"{members} is not connected at {t}")
    return violations

import itertools

import pytest
import torch
from conftest import RATE, WALKTHROUGH_EXPECTED, to_degrees

from torchcomove.config import CliqueLimitError, ConfigurationError
from torchcomove.evolving import (
    MC,
    MCS,
    DetectionParams,
    EvolvingCluster,
    EvolvingClusters,
    Mode,
    ProximityGraph,
    TimeSlice,
    build_proximity_graph,
    check_cluster,
    detect,
    maximal_components,
    slices_from_points,
)
from torchcomove.geo import TimestampedPoint, haversine_distance
from torchcomove.io import points_from_frame
from torchcomove.preprocess import grid_times
from torchcomove.synth import GroupSpec, SynthScenario, generate


def graph_from_edges(nodes: str, edges: list[str]) -> ProximityGraph:
    index = {n: i for i, n in enumerate(nodes)}
    adjacency = torch.zeros(len(nodes), len(nodes), dtype=torch.bool)
    for u, v in edges:
        adjacency[index[u], index[v]] = adjacency[index[v], index[u]] = True
    return ProximityGraph(tuple(nodes), adjacency)


def brute_force(graph: ProximityGraph, c: int):
    n = len(graph.nodes)
    A = graph.adjacency
    cliques = [
        set(s)
        for k in range(c, n + 1)
        for s in itertools.combinations(range(n), k)
        if all(A[i, j] for i, j in itertools.combinations(s, 2))
    ]
    maximal = [s for s in cliques if not any(s < o for o in cliques)]

    seen, components = set(), []
    for v in range(n):
        if v in seen:
            continue
        component, frontier = {v}, [v]
        while frontier:
            u = frontier.pop()
            for w in torch.nonzero(A[u]).ravel().tolist():
                if w not in component:
                    component.add(w)
                    frontier.append(w)
        seen |= component
        if len(component) >= c:
            components.append(component)

    name = lambda s: tuple(graph.nodes[i] for i in sorted(s))  # noqa: E731
    return sorted(map(name, maximal)), sorted(map(name, components))


def slice_of(t: float, layout: dict[str, tuple[float, float]]) -> TimeSlice:
    return TimeSlice(t, {o: to_degrees(*xy) for o, xy in layout.items()})


TRIANGLE = {"a": (0.0, 0.0), "b": (1000.0, 0.0), "c": (500.0, 800.0)}
FAR = {"a": (0.0, 0.0), "b": (5000.0, 0.0), "c": (10000.0, 0.0)}


@pytest.mark.parametrize("dx, edge", [(1000.0, True), (1499.0, True), (2000.0, False)])
def test_proximity_threshold(dx, edge):
    ts = slice_of(0.0, {"a": (0.0, 0.0), "b": (dx, 0.0)})
    graph = build_proximity_graph(ts, 1500.0)
    assert graph.nodes == ("a", "b")
    assert graph.adjacency[0, 1].item() is edge
    assert not graph.adjacency[0, 0]


def test_proximity_brute_force():
    g = torch.Generator().manual_seed(0)
    xy = 5000.0 * torch.rand(30, 2, generator=g, dtype=torch.float64)
    ts = slice_of(0.0, {f"o{i:02d}": (float(x), float(y)) for i, (x, y) in enumerate(xy)})
    graph = build_proximity_graph(ts, 1500.0)
    points = [TimestampedPoint(n, *ts.positions[n], 0.0) for n in graph.nodes]
    for i, j in itertools.combinations(range(30), 2):
        expected = haversine_distance(points[i], points[j]) <= 1500.0
        assert graph.adjacency[i, j].item() is expected
        assert graph.adjacency[j, i].item() is expected


def test_components_triangle():
    graph = graph_from_edges("abc", ["ab", "bc", "ac"])
    groups = maximal_components(graph, 3)
    assert groups.mc == [("a", "b", "c")]
    assert groups.mcs == [("a", "b", "c")]


def test_components_path():
    graph = graph_from_edges("abc", ["ab", "bc"])
    groups = maximal_components(graph, 3)
    assert groups.mc == []
    assert groups.mcs == [("a", "b", "c")]


def test_components_empty_graph():
    graph = ProximityGraph((), torch.zeros(0, 0, dtype=torch.bool))
    assert maximal_components(graph, 3) == ([], [])


@pytest.mark.parametrize("seed", range(200))
def test_components_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    n = int(torch.randint(1, 13, (1,), generator=g))
    p = float(torch.rand(1, generator=g))
    upper = torch.triu(torch.rand(n, n, generator=g) < p, diagonal=1)
    nodes = tuple(f"v{i:02d}" for i in range(n))
    graph = ProximityGraph(nodes, upper | upper.T)
    c = int(torch.randint(2, 5, (1,), generator=g))
    mc, mcs = brute_force(graph, c)
    groups = maximal_components(graph, c)
    assert groups.mc == mc
    assert groups.mcs == mcs


def test_clique_limit():
    nodes = tuple(f"v{i:02d}" for i in range(12))
    # Complement of a perfect matching has 2**6 maximal cliques
    adjacency = ~torch.eye(12, dtype=torch.bool)
    for i in range(0, 12, 2):
        adjacency[i, i + 1] = adjacency[i + 1, i] = False
    graph = ProximityGraph(nodes, adjacency)
    assert len(maximal_components(graph, 3, kinds=(MC,)).mc) == 64
    with pytest.raises(CliqueLimitError):
        maximal_components(graph, 3, kinds=(MC,), max_cliques=10)


def test_walkthrough(walkthrough_slices):
    params = DetectionParams(c=3, d=2, theta=1500.0, align_rate=RATE)
    clusters = sorted(detect(walkthrough_slices, params), key=lambda e: e.key)
    assert clusters == WALKTHROUGH_EXPECTED


def test_walkthrough_named_patterns(walkthrough_slices):
    params = DetectionParams(c=3, d=2, align_rate=RATE)
    keys = {e.key for e in detect(walkthrough_slices, params)}
    assert (tuple("abcde"), 60.0, 300.0, MCS) in keys
    assert (tuple("abc"), 60.0, 300.0, MC) in keys
    assert (tuple("fghi"), 300.0, 360.0, MC) in keys
    # The first three slices alone
    first = {e.key for e in detect(walkthrough_slices[:3], params)}
    assert (tuple("abcdefghi"), 60.0, 180.0, MCS) in first
    assert (tuple("abc"), 60.0, 180.0, MC) in first
    assert (tuple("ghi"), 60.0, 180.0, MC) in first


@pytest.mark.parametrize("mode, kinds", [("mc", {MC}), ("mcs", {MCS}), ("both", {MC, MCS})])
def test_mode(walkthrough_slices, mode, kinds):
    params = DetectionParams(c=3, d=2, mode=mode, align_rate=RATE)
    assert {e.tp for e in detect(walkthrough_slices, params)} == kinds


def test_walkthrough_valid(walkthrough_slices):
    params = DetectionParams(c=3, d=2, align_rate=RATE)
    for cluster in detect(walkthrough_slices, params):
        assert check_cluster(cluster, walkthrough_slices, params) == []


def test_duration_gate():
    params = DetectionParams(c=3, d=3, align_rate=RATE)
    slices = [slice_of(60.0, TRIANGLE), slice_of(120.0, TRIANGLE), slice_of(180.0, FAR)]
    assert detect(slices, params) == []
    slices.insert(2, slice_of(180.0, TRIANGLE))
    slices[-1] = slice_of(240.0, FAR)
    assert [e.key for e in detect(slices, params)] == [
        (("a", "b", "c"), 60.0, 180.0, MC),
        (("a", "b", "c"), 60.0, 180.0, MCS),
    ]


def test_flush():
    params = DetectionParams(c=3, d=2, align_rate=RATE)
    detector = EvolvingClusters(params)
    assert detector.flush() == []
    assert detector.step(slice_of(60.0, TRIANGLE)) == []
    assert detector.step(slice_of(120.0, TRIANGLE)) == []
    assert len(detector.active_patterns()) == 2
    assert len(detector.flush()) == 2
    assert detector.flush() == []


def test_non_monotonic():
    detector = EvolvingClusters(DetectionParams())
    detector.step(slice_of(120.0, TRIANGLE))
    with pytest.raises(ValueError, match="non-monotonic time"):
        detector.step(slice_of(120.0, TRIANGLE))
    with pytest.raises(ValueError, match="non-monotonic time"):
        detector.step(slice_of(60.0, TRIANGLE))


def test_gap_terminates_patterns():
    params = DetectionParams(c=3, d=2, mode="mcs", align_rate=RATE)
    slices = [slice_of(t, TRIANGLE) for t in (60.0, 120.0, 240.0, 300.0)]
    assert [(e.t_start, e.t_end) for e in detect(slices, params)] == [
        (60.0, 120.0),
        (240.0, 300.0),
    ]


def test_progressive():
    params = DetectionParams(c=3, d=2, mode="mcs", align_rate=RATE, progressive=True)
    detector = EvolvingClusters(params)
    assert detector.step(slice_of(60.0, TRIANGLE)) == []
    provisional = detector.step(slice_of(120.0, TRIANGLE))
    assert [(e.members, e.t_end, e.provisional) for e in provisional] == [
        (("a", "b", "c"), 120.0, True)
    ]
    assert detector.step(slice_of(180.0, TRIANGLE)) == []
    final = detector.flush()
    assert [(e.t_start, e.t_end, e.provisional) for e in final] == [(60.0, 180.0, False)]


def test_check_cluster_violations(walkthrough_slices):
    params = DetectionParams(c=3, d=2, align_rate=RATE)
    # a is never within reach of g
    bogus = EvolvingCluster(("a", "g", "h"), 60.0, 120.0, MC)
    assert any("not a clique" in v for v in check_cluster(bogus, walkthrough_slices, params))
    split = EvolvingCluster(("a", "b", "g"), 240.0, 300.0, MCS)
    assert any("not connected" in v for v in check_cluster(split, walkthrough_slices, params))
    short = EvolvingCluster(("a", "b", "c"), 60.0, 60.0, MC)
    assert any("fewer than 2" in v for v in check_cluster(short, walkthrough_slices, params))


def test_slices_from_points():
    points = [
        TimestampedPoint("a", 0.0, 0.0, 60.0),
        TimestampedPoint("b", 1.0, 0.0, 60.0),
        TimestampedPoint("a", 0.5, 0.0, 180.0),
    ]
    slices = slices_from_points(points, grid=[60.0, 120.0, 180.0])
    assert [ts.t for ts in slices] == [60.0, 120.0, 180.0]
    assert slices[1].positions == {}
    with pytest.raises(ValueError):
        slices_from_points(points + [TimestampedPoint("a", 0.0, 0.0, 60.0)])


@pytest.mark.parametrize(
    "kwargs", [{"c": 1}, {"theta": 0.0}, {"d": 0}, {"mode": "flock"}, {"align_rate": -1.0}]
)
def test_params_invalid(kwargs):
    with pytest.raises(ConfigurationError):
        DetectionParams(**kwargs)


def test_mode_parsing():
    assert DetectionParams(mode="MCS").mode is Mode.MCS
    assert Mode.BOTH.kinds == (MC, MCS)


def random_scenario(seed: int) -> SynthScenario:
    g = torch.Generator().manual_seed(seed)
    n_objects = int(torch.randint(10, 51, (1,), generator=g))
    duration = RATE * int(torch.randint(20, 120, (1,), generator=g))
    groups = []
    used = 0
    for _ in range(int(torch.randint(1, 4, (1,), generator=g))):
        size = int(torch.randint(3, 7, (1,), generator=g))
        if used + size > n_objects:
            break
        used += size
        start = RATE * int(torch.randint(0, int(duration / RATE) - 5, (1,), generator=g))
        motion = ("linear", "arc", "random-walk")[int(torch.randint(0, 3, (1,), generator=g))]
        groups.append(GroupSpec(size, radius=300.0, start=start, motion=motion))
    return SynthScenario(
        n_objects=n_objects, duration=duration, groups=groups, noise_sigma=10.0, seed=seed
    )


@pytest.mark.parametrize("seed", range(20))
def test_synthetic_clusters_valid(seed):
    df, truth = generate(random_scenario(seed))
    t0, t1 = float(df["t"].min()), float(df["t"].max())
    slices = slices_from_points(points_from_frame(df), grid_times(t0, t1, RATE, t0).tolist())
    params = DetectionParams(align_rate=RATE)
    clusters = detect(slices, params)
    for cluster in clusters:
        assert check_cluster(cluster, slices, params) == []

    mcs = [e for e in clusters if e.tp == MCS]
    for group in truth:
        members = set(group.members)
        best = max(
            (len(members & set(e.members)) / len(members | set(e.members)) for e in mcs),
            default=0.0,
        )
        assert best >= 0.9

    # Every clique lies inside a component pattern covering its lifetime
    for e in clusters:
        if e.tp == MC:
            assert any(
                set(e.members) <= set(f.members)
                and f.t_start <= e.t_start
                and f.t_end >= e.t_end
                for f in mcs
            )

import json
import logging
from dataclasses import asdict, is_dataclass
from os import PathLike
from typing import Any, Iterable, Sequence

import pandas as pd
import torch

from .evaluation import MatchReport
from .evolving import EvolvingCluster, TimeSlice
from .geo import TimestampedPoint, Trajectory

logger = logging.getLogger(__name__)

POINT_COLUMNS = ["object_id", "t", "lon", "lat"]
CLUSTER_COLUMNS = ["members", "t_start", "t_end", "tp"]
MATCH_COLUMNS = [
    "pred_members",
    "pred_start",
    "pred_end",
    "act_members",
    "act_start",
    "act_end",
    "sim_spatial",
    "sim_temp",
    "sim_member",
    "sim_star",
]


def parse_timestamps(values: pd.Series) -> pd.Series:
    """Unix seconds or ISO 8601 strings to float seconds (NaN if unparsable)."""
    t = pd.to_numeric(values, errors="coerce")
    iso = t.isna() & values.notna()
    if iso.any():
        dt = pd.to_datetime(values[iso], errors="coerce", utc=True, format="ISO8601")
        epoch = pd.Timestamp("1970-01-01", tz="UTC")
        t[iso] = (dt - epoch) / pd.Timedelta(seconds=1)
    return t.astype("float64")


def read_points(filename: str | PathLike) -> tuple[pd.DataFrame, int]:
    """Read `object_id,timestamp,lon,lat` records, skipping malformed lines.

    Returns the valid records sorted by time (stable) and the number of
    malformed lines.
    """
    bad_lines: list[list[str]] = []

    def on_bad_line(line: list[str]):
        bad_lines.append(line)
        return None

    try:
        raw = pd.read_csv(
            filename,
            header=None,
            names=POINT_COLUMNS,
            dtype=str,
            keep_default_na=False,
            na_values=[""],
            skipinitialspace=True,
            on_bad_lines=on_bad_line,
            engine="python",
        )
    except pd.errors.EmptyDataError:
        raw = pd.DataFrame(columns=POINT_COLUMNS, dtype=str)

    df = pd.DataFrame({"object_id": raw["object_id"].fillna("").astype(str).str.strip()})
    df["t"] = parse_timestamps(raw["t"])
    df["lon"] = pd.to_numeric(raw["lon"], errors="coerce")
    df["lat"] = pd.to_numeric(raw["lat"], errors="coerce")

    valid = (
        (df["object_id"] != "")
        & df[["t", "lon", "lat"]].notna().all(axis=1)
        & df["lon"].between(-180.0, 180.0)
        & df["lat"].between(-90.0, 90.0)
    )

    # Optional header
    if len(df) > 0 and not valid.iloc[0]:
        first = raw.iloc[0]
        if isinstance(first["lon"], str) and isinstance(first["lat"], str):
            if pd.isna(df["lon"].iloc[0]) and pd.isna(df["lat"].iloc[0]):
                df = df.iloc[1:]
                valid = valid.iloc[1:]

    n_malformed = len(bad_lines) + int((~valid).sum())
    if n_malformed:
        logger.warning("Skipped %d malformed lines in %s", n_malformed, filename)
    df = df[valid].astype({"object_id": str})
    df = df.sort_values("t", kind="stable").reset_index(drop=True)
    return df, n_malformed


def trajectories_from_points(df: pd.DataFrame) -> list[Trajectory]:
    """One trajectory per object, dropping duplicate timestamps (first kept)."""
    df = df.sort_values(["object_id", "t"], kind="stable")
    duplicated = df.duplicated(["object_id", "t"], keep="first")
    if duplicated.any():
        logger.warning("Dropped %d duplicate (object, timestamp) rows", duplicated.sum())
        df = df[~duplicated]

    # Antimeridian crossings are not supported
    crossing = df.groupby("object_id")["lon"].diff().abs() > 180.0
    if crossing.any():
        dropped = sorted(df.loc[crossing, "object_id"].astype(str).unique())
        logger.warning(
            "Dropped %d trajectories crossing the antimeridian: %s", len(dropped), dropped
        )
        df = df[~df["object_id"].astype(str).isin(dropped)]
    return [
        Trajectory(
            str(object_id),
            torch.tensor(group["t"].to_numpy(), dtype=torch.float64),
            torch.tensor(group["lon"].to_numpy(), dtype=torch.float64),
            torch.tensor(group["lat"].to_numpy(), dtype=torch.float64),
        )
        for object_id, group in df.groupby("object_id", sort=True)
    ]


def points_frame(trajectories: Iterable[Trajectory]) -> pd.DataFrame:
    frames = [
        pd.DataFrame(
            {
                "object_id": traj.object_id,
                "t": traj.t.numpy(),
                "lon": traj.lon.numpy(),
                "lat": traj.lat.numpy(),
            }
        )
        for traj in trajectories
        if len(traj) > 0
    ]
    if not frames:
        return pd.DataFrame(columns=POINT_COLUMNS)
    df = pd.concat(frames, ignore_index=True)
    return df.sort_values(["t", "object_id"], kind="stable").reset_index(drop=True)


def points_from_frame(df: pd.DataFrame) -> list[TimestampedPoint]:
    return [
        TimestampedPoint(str(o), float(x), float(y), float(t))
        for o, t, x, y in df[POINT_COLUMNS].itertuples(index=False)
    ]


def write_points(df: pd.DataFrame, filename: str | PathLike):
    df[POINT_COLUMNS].to_csv(filename, index=False)


def write_predictions(points: Sequence[TimestampedPoint], filename: str | PathLike):
    df = pd.DataFrame(
        [(p.object_id, p.t, p.lon, p.lat) for p in points],
        columns=["object_id", "t_pred", "lon", "lat"],
    )
    df.to_csv(filename, index=False)


def write_forecasts(
    points: Iterable[tuple[float, TimestampedPoint]], filename: str | PathLike
):
    """Interpolated predicted points with the slice time they were issued at."""
    df = pd.DataFrame(
        [(p.object_id, t_now, p.t, p.lon, p.lat) for t_now, p in points],
        columns=["object_id", "t_issued", "t_pred", "lon", "lat"],
    )
    df.to_csv(filename, index=False)


def write_slices(slices: Iterable[TimeSlice], filename: str | PathLike):
    rows = [
        (object_id, ts.t, lon, lat)
        for ts in slices
        for object_id, (lon, lat) in sorted(ts.positions.items())
    ]
    pd.DataFrame(rows, columns=POINT_COLUMNS).to_csv(filename, index=False)


def clusters_frame(clusters: Iterable[EvolvingCluster]) -> pd.DataFrame:
    rows = [(";".join(e.members), e.t_start, e.t_end, e.tp) for e in clusters]
    return pd.DataFrame(rows, columns=CLUSTER_COLUMNS)


def write_clusters(clusters: Iterable[EvolvingCluster], filename: str | PathLike):
    clusters_frame(clusters).to_csv(filename, index=False)


def write_clusters_jsonl(clusters: Iterable[EvolvingCluster], filename: str | PathLike):
    with open(filename, "w", encoding="utf-8") as f:
        for e in clusters:
            record = {
                "members": list(e.members),
                "t_start": e.t_start,
                "t_end": e.t_end,
                "tp": e.tp,
            }
            f.write(json.dumps(record) + "\n")


def read_clusters(filename: str | PathLike) -> list[EvolvingCluster]:
    df = pd.read_csv(filename, dtype={"members": str})
    missing = set(CLUSTER_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{filename} lacks cluster columns {sorted(missing)}.")
    return [
        EvolvingCluster(tuple(m.split(";")), float(t0), float(t1), int(tp))
        for m, t0, t1, tp in df[CLUSTER_COLUMNS].itertuples(index=False)
    ]


def write_matches(report: MatchReport, filename: str | PathLike):
    rows = [
        (
            ";".join(m.predicted.members),
            m.predicted.t_start,
            m.predicted.t_end,
            ";".join(m.actual.members),
            m.actual.t_start,
            m.actual.t_end,
            m.sim_spatial,
            m.sim_temporal,
            m.sim_member,
            m.sim_star,
        )
        for m in report.pairs
    ]
    pd.DataFrame(rows, columns=MATCH_COLUMNS).to_csv(filename, index=False)


def _jsonable(value: Any):
    if is_dataclass(value) and not isinstance(value, type):
        return asdict(value)
    if isinstance(value, torch.Tensor):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable.")


def write_json(data: Any, filename: str | PathLike):
    with open(filename, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def write_losses(losses: Sequence[float], filename: str | PathLike):
    df = pd.DataFrame({"epoch": range(1, len(losses) + 1), "loss": list(losses)})
    df.to_csv(filename, index=False)


def write_geojson(
    streams: dict[str, Iterable[EvolvingCluster]], filename: str | PathLike
):
    """Per-timeslice cluster boxes as polygons, one feature collection."""
    features = []
    for stream, clusters in streams.items():
        for e in clusters:
            for t, box in e.footprint:
                ring = [list(c) for c in box.corners]
                features.append(
                    {
                        "type": "Feature",
                        "geometry": {"type": "Polygon", "coordinates": [ring + ring[:1]]},
                        "properties": {
                            "stream": stream,
                            "members": ";".join(e.members),
                            "t_start": e.t_start,
                            "t_end": e.t_end,
                            "tp": e.tp,
                            "t": t,
                        },
                    }
                )
    write_json({"type": "FeatureCollection", "features": features}, filename)

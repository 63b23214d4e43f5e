import logging
import math
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from os import PathLike
from typing import Iterable, Iterator

import pandas as pd

from .config import ConfigurationError
from .evaluation import (
    MatchReport,
    SimWeights,
    Summary,
    cluster_matching,
    locate,
    summarize_values,
)
from .evolving import DetectionParams, EvolvingCluster, EvolvingClusters, TimeSlice
from .flp import ConstantVelocityPredictor, GruPredictor, Predictor, load_model
from .geo import TimestampedPoint, Trajectory
from .io import read_points
from .preprocess import OnlineCleaner, PreprocessConfig, grid_epoch, interpolate_at

logger = logging.getLogger(__name__)

CONSUMERS = ("flp", "detection")


@dataclass(frozen=True)
class StreamRecord:
    point: TimestampedPoint
    ingest_time: float


def parse_speed(value: str | float | None) -> float | None:
    """Replay multiplier; None (or "max") replays as fast as possible."""
    if value is None or (isinstance(value, str) and value.strip().lower() == "max"):
        return None
    speed = float(value)
    if not speed > 0.0:
        raise ConfigurationError("Replay speed must be positive or 'max'.")
    return speed


def replay_frame(df: pd.DataFrame, speed: float | None = None) -> Iterator[StreamRecord]:
    """Emit points in timestamp order, paced at speed times the data rate."""
    df = df.sort_values("t", kind="stable")
    start_wall = time.monotonic()
    t_data0 = None
    for object_id, t, lon, lat in df[["object_id", "t", "lon", "lat"]].itertuples(
        index=False
    ):
        if speed is not None:
            if t_data0 is None:
                t_data0 = t
            delay = start_wall + (t - t_data0) / speed - time.monotonic()
            if delay > 0.0:
                time.sleep(delay)
        point = TimestampedPoint(str(object_id), float(lon), float(lat), float(t))
        yield StreamRecord(point, time.time())


def replay_stream(
    filename: str | PathLike, speed: float | str | None = None
) -> Iterator[StreamRecord]:
    df, n_malformed = read_points(filename)
    logger.info("Replaying %d records from %s (%d malformed)", len(df), filename, n_malformed)
    return replay_frame(df, parse_speed(speed))


class Topic:
    """Bounded in-process log read by named consumers at their own offsets.

    Records are dropped once every consumer has read them; publishing blocks
    while the log holds `capacity` unread records.
    """

    def __init__(self, capacity: int = 65536, consumers: Iterable[str] = CONSUMERS):
        if capacity < 1:
            raise ConfigurationError("Topic capacity must be positive.")
        self.capacity = capacity
        self._records: deque[StreamRecord] = deque()
        self._base = 0
        self._end = 0
        self._offsets = {name: 0 for name in consumers}
        self._closed = False
        self._cond = threading.Condition()

    @property
    def end(self) -> int:
        return self._end

    @property
    def closed(self) -> bool:
        return self._closed

    def publish(self, record: StreamRecord):
        with self._cond:
            if self._closed:
                raise RuntimeError("Cannot publish to a closed topic.")
            while self._end - self._base >= self.capacity:
                self._cond.wait()
            self._records.append(record)
            self._end += 1
            self._cond.notify_all()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def poll(self, consumer: str, max_records: int = 1, block: bool = True):
        """Next records for a consumer; empty once the topic is closed and read."""
        with self._cond:
            offset = self._offsets[consumer]
            while block and offset == self._end and not self._closed:
                self._cond.wait()
            n = min(max_records, self._end - offset)
            records = [self._records[offset - self._base + i] for i in range(n)]
            self._offsets[consumer] = offset + n

            # Drop records every consumer has read
            low = min(self._offsets.values(), default=self._end)
            while self._base < low:
                self._records.popleft()
                self._base += 1
            self._cond.notify_all()
            return records

    def detach(self, consumer: str):
        """Stop tracking a failed consumer so it no longer holds back the log."""
        with self._cond:
            self._offsets.pop(consumer, None)
            low = min(self._offsets.values(), default=self._end)
            while self._base < low:
                self._records.popleft()
                self._base += 1
            self._cond.notify_all()

    def lag(self, consumer: str) -> int:
        with self._cond:
            return self._end - self._offsets[consumer]

    def drained(self, consumer: str) -> bool:
        with self._cond:
            return self._closed and self._offsets[consumer] == self._end


class ConsumerMetrics:
    """Record lag per consumed record and consumption rate per wall window."""

    def __init__(self, name: str, window: float = 1.0):
        self.name = name
        self.window = window
        self.lags: list[int] = []
        self.rates: list[float] = []
        self._window_start: float | None = None
        self._count = 0

    @property
    def n_consumed(self) -> int:
        return len(self.lags)

    def record(self, lag: int, now: float | None = None):
        now = time.perf_counter() if now is None else now
        if self._window_start is None:
            self._window_start = now
        # Idle windows count as zero
        while now - self._window_start >= self.window:
            self.rates.append(self._count / self.window)
            self._count = 0
            self._window_start += self.window
        self._count += 1
        self.lags.append(lag)

    def finish(self):
        if self._count:
            self.rates.append(self._count / self.window)
            self._count = 0

    def summary(self) -> dict[str, int | Summary]:
        zero = Summary(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return {
            "records": self.n_consumed,
            "record_lag": summarize_values(self.lags) or zero,
            "consumption_rate": summarize_values(self.rates) or zero,
        }


@dataclass
class PipelineConfig:
    delta_t: float = 300.0
    align_rate: float = 60.0
    detection: DetectionParams = field(default_factory=DetectionParams)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    weights: SimWeights = field(default_factory=SimWeights)
    predictor: str = "cv"
    speed: float | None = None
    lateness: float | None = None
    capacity: int = 65536
    epoch: float | None = None
    per_slice: bool = False

    def __post_init__(self):
        if self.predictor not in ("gru", "cv"):
            raise ConfigurationError(f"Unknown predictor '{self.predictor}'.")
        if not self.align_rate > 0.0:
            raise ConfigurationError("align_rate must be positive.")
        steps = self.delta_t / self.align_rate
        if not self.delta_t > 0.0 or abs(steps - round(steps)) > 1e-9:
            raise ConfigurationError("delta_t must be a positive multiple of align_rate.")
        if self.lateness is None:
            self.lateness = self.align_rate
        if self.lateness < 0.0:
            raise ConfigurationError("lateness must be non-negative.")
        self.speed = parse_speed(self.speed)
        self.detection = replace(self.detection, align_rate=self.align_rate)
        self.preprocess = replace(self.preprocess, align_rate=self.align_rate)

    @property
    def horizon_steps(self) -> int:
        return round(self.delta_t / self.align_rate)


def make_predictor(cfg: PipelineConfig, model: str | PathLike | None = None) -> Predictor:
    if cfg.predictor == "gru":
        if model is None:
            raise ConfigurationError("The gru predictor needs a model file.")
        return GruPredictor(load_model(model))
    return ConstantVelocityPredictor()


class SliceAssembler:
    """Aligned grid timeslices from a time-ordered point stream.

    Slice T closes once a record later than T + lateness arrives; positions
    are interpolated between the cleaned samples bracketing T within one
    gap-free segment.
    """

    def __init__(self, cfg: PreprocessConfig, lateness: float, epoch: float | None = None):
        self.cfg = cfg
        self.lateness = lateness
        self.epoch = epoch
        self.cleaner = OnlineCleaner(cfg)
        self.watermark = -math.inf
        self.last_t: float | None = None
        self._k: int | None = None
        self._buffers: dict[str, list[TimestampedPoint]] = {}

    @property
    def next_t(self) -> float | None:
        if self._k is None:
            return None
        return self.epoch + self._k * self.cfg.align_rate

    def push(self, p: TimestampedPoint) -> list[TimeSlice]:
        if self.epoch is None:
            self.epoch = grid_epoch(p.t)
        if self._k is None:
            self._k = math.ceil((p.t - self.epoch) / self.cfg.align_rate)
        if self.last_t is not None and p.t <= self.last_t:
            logger.debug("Late record of %s at %s ignored", p.object_id, p.t)
            return []
        if self.cleaner.accept(p):
            self._buffers.setdefault(p.object_id, []).append(p)
        self.watermark = max(self.watermark, p.t)

        closed = []
        while self.watermark > self.next_t + self.lateness:
            closed.append(self._close())
        return closed

    def close(self) -> list[TimeSlice]:
        """Close the remaining slices up to the latest record."""
        closed = []
        while self._k is not None and self.next_t <= self.watermark:
            closed.append(self._close())
        return closed

    def _close(self) -> TimeSlice:
        t = self.next_t
        positions = {}
        for object_id, buf in self._buffers.items():
            i = None
            for j, p in enumerate(buf):
                if p.t > t:
                    break
                i = j
            if i is None:
                continue
            a = buf[i]
            if a.t == t:
                positions[object_id] = (a.lon, a.lat)
            elif i + 1 < len(buf) and buf[i + 1].t - a.t <= self.cfg.gap_dt:
                positions[object_id] = interpolate_at(a, buf[i + 1], t)
            del buf[:i]
        self.last_t = t
        self._k += 1
        return TimeSlice(t, dict(sorted(positions.items())))


@dataclass(frozen=True)
class Forecast:
    """Predicted grid positions in (t_now, t_now + delta_t] issued at t_now."""

    t_now: float
    points: tuple[TimestampedPoint, ...]


class _Consumer:
    name = ""

    def __init__(self, topic: Topic, cfg: PipelineConfig):
        self.topic = topic
        self.cfg = cfg
        self.assembler = SliceAssembler(cfg.preprocess, cfg.lateness, cfg.epoch)
        self.metrics = ConsumerMetrics(self.name)

    def consume(self, block: bool) -> bool:
        records = self.topic.poll(self.name, max_records=1, block=block)
        for record in records:
            for ts in self.assembler.push(record.point):
                self.on_slice(ts)
            self.metrics.record(self.topic.lag(self.name))
        return bool(records)

    def run(self):
        try:
            while not self.topic.drained(self.name):
                self.consume(block=True)
        except BaseException:
            self.topic.detach(self.name)
            raise
        self.finish()

    def finish(self):
        for ts in self.assembler.close():
            self.on_slice(ts)
        self.metrics.finish()

    def on_slice(self, ts: TimeSlice):
        raise NotImplementedError


class DetectionConsumer(_Consumer):
    name = "detection"

    def __init__(self, topic: Topic, cfg: PipelineConfig):
        super().__init__(topic, cfg)
        self.detector = EvolvingClusters(cfg.detection)
        self.slices: list[TimeSlice] = []
        self.clusters: list[EvolvingCluster] = []

    def on_slice(self, ts: TimeSlice):
        self.slices.append(ts)
        self.clusters += self.detector.step(ts)

    def finish(self):
        super().finish()
        self.clusters += self.detector.flush()


class FlpConsumer(_Consumer):
    """Forecasts every closed slice and detects clusters on the predicted grid.

    The predicted detector first replays the actual slices of the warm-up
    window [T_first, T_first + delta_t), then the forecast endpoint for each
    later grid time. Slice T is fed once the actual slice T has closed, so
    both detectors cover the same grid.
    """

    name = "flp"

    def __init__(self, topic: Topic, cfg: PipelineConfig, predictor: Predictor):
        super().__init__(topic, cfg)
        self.predictor = predictor
        self.detector = EvolvingClusters(cfg.detection)
        self.history: dict[str, deque[tuple[float, float, float]]] = {}
        self.forecasts: list[Forecast] = []
        self.slices: list[TimeSlice] = []
        self.clusters: list[EvolvingCluster] = []
        self.t_first: float | None = None
        self.t_last: float | None = None
        # Predicted-stream slices keyed by grid index from t_first
        self._pending: dict[int, TimeSlice] = {}
        self._n_seen = 0
        self._n_fed = 0

    def grid_time(self, k: int) -> float:
        """Timestamp of the k-th grid slice, computed like the assembler does."""
        epoch = self.assembler.epoch
        k0 = round((self.t_first - epoch) / self.cfg.align_rate)
        return epoch + (k0 + k) * self.cfg.align_rate

    def on_slice(self, ts: TimeSlice):
        rate = self.cfg.align_rate
        m = self.cfg.horizon_steps
        if self.t_first is None:
            self.t_first = ts.t
        k = self._n_seen
        self._n_seen += 1
        self.t_last = ts.t

        # Aligned history, reset at grid holes
        for object_id, (lon, lat) in ts.positions.items():
            hist = self.history.get(object_id)
            if hist is None or ts.t - hist[-1][0] > rate * (1.0 + 1e-9):
                hist = deque(maxlen=max(2, self.predictor.history_len))
                self.history[object_id] = hist
            hist.append((ts.t, lon, lat))

        if k < m:
            self._pending[k] = ts

        forecast = self._forecast(ts, k)
        self.forecasts.append(forecast)
        t_end = self.grid_time(k + m)
        self._pending[k + m] = TimeSlice(
            t_end,
            {p.object_id: (p.lon, p.lat) for p in forecast.points if p.t == t_end},
        )
        self._drain(k)

    def _forecast(self, ts: TimeSlice, k: int) -> Forecast:
        m = self.cfg.horizon_steps
        t_end = self.grid_time(k + m)
        points = []
        for object_id, (lon, lat) in ts.positions.items():
            rows = list(self.history[object_id])
            traj = Trajectory(object_id, *[[row[i] for row in rows] for i in range(3)])
            p = self.predictor.predict(traj, t_end - ts.t)
            a = TimestampedPoint(object_id, lon, lat, ts.t)
            b = TimestampedPoint(object_id, p.lon, p.lat, t_end)
            for j in range(k + 1, k + m):
                t = self.grid_time(j)
                points.append(TimestampedPoint(object_id, *interpolate_at(a, b, t), t))
            points.append(b)
        return Forecast(ts.t, tuple(points))

    def _drain(self, until: int):
        while self._n_fed <= until and self._n_fed in self._pending:
            ts = self._pending.pop(self._n_fed)
            self.slices.append(ts)
            self.clusters += self.detector.step(ts)
            self._n_fed += 1

    def finish(self):
        super().finish()
        # Forecasts beyond the last actual slice have nothing to compare against
        self._pending.clear()
        self.clusters += self.detector.flush()


@dataclass
class PipelineResult:
    actual: list[EvolvingCluster]
    predicted: list[EvolvingCluster]
    report: MatchReport
    metrics: dict[str, ConsumerMetrics]
    forecasts: list[Forecast]
    actual_slices: list[TimeSlice]
    predicted_slices: list[TimeSlice]
    horizon_start: float | None

    @property
    def predicted_points(self) -> list[tuple[float, TimestampedPoint]]:
        return [(f.t_now, p) for f in self.forecasts for p in f.points]


class OnlinePipeline:
    """Dual detection over actual and predicted timeslices of one stream."""

    def __init__(self, cfg: PipelineConfig, predictor: Predictor):
        self.cfg = cfg
        self.predictor = predictor

    def run(self, stream: Iterable[StreamRecord], threaded: bool = False) -> PipelineResult:
        topic = Topic(self.cfg.capacity)
        detection = DetectionConsumer(topic, self.cfg)
        flp = FlpConsumer(topic, self.cfg, self.predictor)

        if threaded:
            with ThreadPoolExecutor(max_workers=2) as pool:
                futures = [pool.submit(c.run) for c in (flp, detection)]
                try:
                    for record in stream:
                        topic.publish(record)
                finally:
                    topic.close()
                for f in futures:
                    f.result()
        else:
            for record in stream:
                topic.publish(record)
                for consumer in (flp, detection):
                    while consumer.consume(block=False):
                        pass
            topic.close()
            for consumer in (flp, detection):
                consumer.finish()

        return self._evaluate(detection, flp)

    def _evaluate(self, detection: DetectionConsumer, flp: FlpConsumer) -> PipelineResult:
        actual = locate(detection.clusters, detection.slices)
        predicted = locate(flp.clusters, flp.slices)

        # Compare only clusters alive once forecasts take over
        horizon = None if flp.t_first is None else flp.grid_time(self.cfg.horizon_steps)
        if horizon is None:
            report = MatchReport()
        else:
            report = cluster_matching(
                [e for e in predicted if e.t_end >= horizon],
                [e for e in actual if e.t_end >= horizon],
                self.cfg.weights,
                self.cfg.per_slice,
            )
        logger.info(
            "Stream done: %d actual and %d predicted clusters over %d slices",
            len(actual),
            len(predicted),
            len(detection.slices),
        )
        return PipelineResult(
            actual,
            predicted,
            report,
            {c.name: c.metrics for c in (flp, detection)},
            flp.forecasts,
            detection.slices,
            flp.slices,
            horizon,
        )


def run_online(
    cfg: PipelineConfig,
    stream: Iterable[StreamRecord],
    predictor: Predictor | None = None,
    threaded: bool = False,
) -> PipelineResult:
    if predictor is None:
        predictor = make_predictor(cfg)
    return OnlinePipeline(cfg, predictor).run(stream, threaded)


def collect_metrics(result: PipelineResult) -> dict[str, dict]:
    return {name: m.summary() for name, m in result.metrics.items()}

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from tqdm import tqdm

from .config import load_config, merge
from .evaluation import SimWeights, cluster_matching, locate, plot_similarity, summarize
from .evolving import DetectionParams, Mode, check_cluster, detect, slices_from_points
from .flp import (
    ConstantVelocityPredictor,
    GruPredictor,
    PredictorConfig,
    build_dataset,
    load_model,
    save_model,
    train_bptt,
)
from .io import (
    points_frame,
    points_from_frame,
    read_clusters,
    read_points,
    trajectories_from_points,
    write_clusters,
    write_clusters_jsonl,
    write_forecasts,
    write_geojson,
    write_json,
    write_losses,
    write_matches,
    write_points,
    write_predictions,
    write_slices,
)
from .pipeline import (
    PipelineConfig,
    collect_metrics,
    make_predictor,
    replay_frame,
    run_online,
)
from .preprocess import (
    PreprocessConfig,
    grid_times,
    preprocess_trajectories,
    split_contiguous,
)
from .synth import GroupSpec, SynthScenario, generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the validation status."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _group(text: str) -> GroupSpec:
    """size[,radius[,start[,end[,motion]]]]"""
    parts = [p.strip() for p in text.split(",")]
    if not 1 <= len(parts) <= 5:
        raise argparse.ArgumentTypeError(f"invalid group '{text}'")
    try:
        kwargs: dict[str, Any] = {"size": int(parts[0])}
        for name, value in zip(("radius", "start", "end"), parts[1:4]):
            kwargs[name] = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid group '{text}'") from None
    if len(parts) == 5:
        kwargs["motion"] = parts[4]
    return GroupSpec(**kwargs)


def _detection_args(parser: argparse.ArgumentParser):
    parser.add_argument("--c", type=int, help="minimum cluster cardinality (3)")
    parser.add_argument("--theta", type=float, help="distance threshold in meters (1500)")
    parser.add_argument("--d", type=int, help="minimum duration in timeslices (3)")
    parser.add_argument("--mode", choices=[m.value for m in Mode], help="cluster types (both)")
    parser.add_argument("--align-rate", type=float, help="grid step in seconds (60)")


def _preprocess_args(parser: argparse.ArgumentParser):
    parser.add_argument("--speed-max", type=float, help="outlier speed in knots (50)")
    parser.add_argument("--gap-dt", type=float, help="segmentation gap in seconds (1800)")
    parser.add_argument("--stop-speed", type=float, help="stop point threshold in knots (0.5)")
    parser.add_argument("--align-rate", type=float, help="grid step in seconds (60)")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="torch-comove",
        description="Predict and evaluate evolving clusters of moving objects.",
    )
    parser.add_argument("--seed", type=int, help="seed for every random number generator")
    parser.add_argument("--config", type=Path, help="YAML file with parameter sections")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fleet with scripted groups")
    p.add_argument("--out", type=Path, required=True, help="points CSV")
    p.add_argument("--truth", type=Path, help="ground-truth clusters CSV")
    p.add_argument("--n-objects", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--sample-rate", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument(
        "--group",
        type=_group,
        action="append",
        dest="groups",
        help="scripted group size[,radius[,start[,end[,motion]]]], repeatable",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clean, segment and align raw points")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _preprocess_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the GRU predictor on aligned points")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="model file to write")
    p.add_argument("--losses", type=Path, help="loss history CSV")
    p.add_argument("--align-rate", type=float, default=60.0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--dense-size", type=int)
    p.add_argument("--window-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict every object's location after a horizon")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path)
    p.add_argument("--predictor", choices=["gru", "cv"], default="gru")
    p.add_argument("--horizon", type=float, default=300.0, help="seconds")
    p.add_argument("--align-rate", type=float, default=60.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("detect", help="detect evolving clusters in aligned points")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="clusters CSV")
    p.add_argument("--jsonl", type=Path, help="also write JSON lines")
    p.add_argument("--progressive", action="store_true", default=None)
    p.add_argument("--validate", action="store_true", help="check every emitted cluster")
    _detection_args(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="match predicted against actual clusters")
    p.add_argument("--predicted", type=Path, required=True, help="predicted clusters CSV")
    p.add_argument("--actual", type=Path, required=True, help="actual clusters CSV")
    p.add_argument("--predicted-points", type=Path, required=True)
    p.add_argument("--actual-points", type=Path, required=True)
    p.add_argument("--lambdas", help="weights l1,l2,l3 (1/3,1/3,1/3)")
    p.add_argument("--per-slice", action="store_true", default=None)
    p.add_argument("--since", type=float, help="only clusters alive at or after this time")
    p.add_argument("--out", type=Path, required=True, help="matches CSV")
    p.add_argument("--summary", type=Path, help="summary JSON")
    p.add_argument("--plot", type=Path, help="similarity box plot")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="replay a stream through prediction and detection")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path)
    p.add_argument("--predictor", choices=["gru", "cv"])
    p.add_argument("--delta-t", type=float, help="lookahead in seconds (300)")
    p.add_argument("--lambdas", help="weights l1,l2,l3 (1/3,1/3,1/3)")
    p.add_argument("--speed", help="replay multiplier or 'max' (max)")
    p.add_argument("--lateness", type=float, help="seconds a slice waits for records")
    p.add_argument("--threaded", action="store_true", help="run consumers in threads")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--plot", action="store_true", help="write similarity.png")
    _detection_args(p)
    p.set_defaults(func=cmd_run)
    return parser


def _options(args: argparse.Namespace, *names: str) -> dict[str, Any]:
    return {n: getattr(args, n) for n in names}


def _preprocess_config(args, config) -> PreprocessConfig:
    flags = _options(args, "speed_max", "gap_dt", "stop_speed", "align_rate")
    return merge(PreprocessConfig(), config.get("preprocess"), flags)


def _detection_params(args, config) -> DetectionParams:
    flags = _options(args, "c", "theta", "d", "mode", "align_rate")
    flags["progressive"] = getattr(args, "progressive", None)
    return merge(DetectionParams(), config.get("detection"), flags)


def _weights(args, config) -> SimWeights:
    if args.lambdas is not None:
        return SimWeights.parse(args.lambdas)
    section = config.get("evaluation") or {}
    weights = section.get("lambdas")
    if weights is None:
        return SimWeights()
    if isinstance(weights, str):
        return SimWeights.parse(weights)
    return SimWeights(*weights)


def _read_trajectories(filename: Path):
    df, _ = read_points(filename)
    return trajectories_from_points(df)


def cmd_synth(args, config) -> int:
    flags = _options(args, "n_objects", "duration", "sample_rate", "noise_sigma", "groups")
    flags["seed"] = args.seed
    scenario = merge(SynthScenario(), config.get("synth"), flags)
    df, truth = generate(scenario)
    write_points(df, args.out)
    if args.truth is not None:
        write_clusters(truth, args.truth)
    return EXIT_OK


def cmd_preprocess(args, config) -> int:
    cfg = _preprocess_config(args, config)
    aligned = preprocess_trajectories(_read_trajectories(args.input), cfg)
    write_points(points_frame(aligned), args.out)
    return EXIT_OK


def cmd_train(args, config) -> int:
    flags = _options(
        args,
        "epochs",
        "hidden_size",
        "dense_size",
        "window_len",
        "batch_size",
        "learning_rate",
    )
    flags["rng_seed"] = args.seed
    cfg = merge(PredictorConfig(), config.get("predictor"), flags)
    trajectories = _read_trajectories(args.input)
    dataset = build_dataset(trajectories, cfg.window_len, cfg.horizon_steps, args.align_rate)
    if not dataset:
        raise ValueError(
            f"No trajectory in {args.input} spans window_len + horizon aligned steps."
        )
    logger.info("Training on %d samples", len(dataset))
    model, losses = train_bptt(dataset, cfg, verbose=args.verbose)
    save_model(model, args.model)
    if args.losses is not None:
        write_losses(losses, args.losses)
    return EXIT_OK


def cmd_predict(args, config) -> int:
    if args.predictor == "gru":
        if args.model is None:
            raise ValueError("The gru predictor needs --model.")
        predictor = GruPredictor(load_model(args.model))
    else:
        predictor = ConstantVelocityPredictor()

    # Predict from the latest gap-free stretch of every object
    latest = {}
    for traj in _read_trajectories(args.input):
        parts = split_contiguous(traj, args.align_rate)
        if parts:
            latest[traj.object_id] = parts[-1]
    points = [predictor.predict(part, args.horizon) for part in latest.values()]
    write_predictions(points, args.out)
    return EXIT_OK


def _slices(filename: Path, align_rate: float | None):
    df, _ = read_points(filename)
    points = points_from_frame(df)
    grid = None
    if align_rate is not None and len(df) > 0:
        t0, t1 = float(df["t"].min()), float(df["t"].max())
        grid = grid_times(t0, t1, align_rate, t0).tolist()
    return slices_from_points(points, grid)


def cmd_detect(args, config) -> int:
    params = _detection_params(args, config)
    slices = _slices(args.input, params.align_rate)
    clusters = detect(slices, params)
    write_clusters(clusters, args.out)
    if args.jsonl is not None:
        write_clusters_jsonl(clusters, args.jsonl)
    if args.validate:
        n_invalid = 0
        for cluster in clusters:
            violations = check_cluster(cluster, slices, params)
            for v in violations:
                logger.error("Invalid cluster: %s", v)
            n_invalid += bool(violations)
        if n_invalid:
            raise RuntimeError(f"{n_invalid} of {len(clusters)} clusters are invalid.")
    return EXIT_OK


def cmd_evaluate(args, config) -> int:
    weights = _weights(args, config)
    section = config.get("evaluation") or {}
    per_slice = args.per_slice
    if per_slice is None:
        per_slice = section.get("per_slice", False)

    predicted = locate(read_clusters(args.predicted), _slices(args.predicted_points, None))
    actual = locate(read_clusters(args.actual), _slices(args.actual_points, None))
    if args.since is not None:
        predicted = [e for e in predicted if e.t_end >= args.since]
        actual = [e for e in actual if e.t_end >= args.since]
    report = cluster_matching(predicted, actual, weights, per_slice)
    write_matches(report, args.out)

    summary = {
        "pairs": len(report.pairs),
        "unmatched_predicted": len(report.unmatched_predicted),
        "similarity": summarize(report),
    }
    if args.summary is not None:
        write_json(summary, args.summary)
    if args.plot is not None:
        plot_similarity(report, args.plot)
    star = summary["similarity"]["sim_star"]
    print(f"pairs={len(report.pairs)} median_sim_star={star.median if star else 'n/a'}")
    return EXIT_OK


def cmd_run(args, config) -> int:
    section = dict(config.get("pipeline") or {})
    flags = _options(args, "delta_t", "predictor", "speed", "lateness", "align_rate")
    cfg = merge(
        PipelineConfig(
            detection=_detection_params(args, config),
            preprocess=merge(PreprocessConfig(), config.get("preprocess")),
            weights=_weights(args, config),
        ),
        section,
        flags,
    )
    predictor = make_predictor(cfg, args.model)

    df, n_malformed = read_points(args.input)
    stream = tqdm(
        replay_frame(df, cfg.speed), total=len(df), unit="rec", disable=not args.verbose
    )
    result = run_online(cfg, stream, predictor, threaded=args.threaded)

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_clusters(result.actual, out / "actual_clusters.csv")
    write_clusters(result.predicted, out / "predicted_clusters.csv")
    write_matches(result.report, out / "matches.csv")
    write_forecasts(result.predicted_points, out / "predicted_points.csv")
    write_slices(result.actual_slices, out / "actual_slices.csv")
    write_slices(result.predicted_slices, out / "predicted_slices.csv")
    write_geojson(
        {"actual": result.actual, "predicted": result.predicted}, out / "clusters.geojson"
    )
    write_json(
        {
            "malformed_lines": n_malformed,
            "horizon_start": result.horizon_start,
            "consumers": collect_metrics(result),
            "similarity": summarize(result.report),
            "pairs": len(result.report.pairs),
            "unmatched_predicted": len(result.report.unmatched_predicted),
        },
        out / "metrics.json",
    )
    if args.plot:
        plot_similarity(result.report, out / "similarity.png")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

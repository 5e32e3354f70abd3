import argparse
import logging
import sys

from kdd_loam import parallel
from kdd_loam.cli.handlers import (
    EXIT_INPUT_ERROR,
    EXIT_PIPELINE_ERROR,
    handle_eval_pair,
    handle_eval_rpe,
    handle_fmr_sweep,
    handle_losses_check,
    handle_map_export,
    handle_register_pair,
    handle_run_odometry,
)
from kdd_loam.errors import KddLoamError, PipelineFailure
from kdd_loam.eval import DEFAULT_RRE_MAX_DEG, DEFAULT_RTE_MAX_CM
from kdd_loam.matchability import (
    DEFAULT_LAMBDA_P,
    DEFAULT_NEGATIVE_MARGIN,
    DEFAULT_POSITIVE_MARGIN,
)
from kdd_loam.matching import MatchMode
from kdd_loam.odometry.config import (
    PipelineConfig,
    apply_overrides,
    load_config,
)

GLOBAL_KEYS = ("seed", "threads")


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT_ERROR, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--seed", type=int, help="Seed for randomized procedures (default 0)"
    )
    common.add_argument("--threads", type=int, help="Worker thread cap (default 1)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    return common


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="Flat key = value config file")
    group = parser.add_argument_group("config overrides (flags win over --config)")
    for key in PipelineConfig.keys():
        if key not in GLOBAL_KEYS:
            group.add_argument(
                f"--{key.replace('_', '-')}", dest=f"override_{key}", metavar="VALUE"
            )


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    common = _common_flags()
    parser = ArgumentParser(prog="kdd-loam", description="LiDAR odometry and mapping")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser(
        "run-odometry", parents=[common], help="Run the odometry pipeline"
    )
    run.add_argument("scan_dir", help="Directory of .bin scans")
    run.add_argument("--features-dir", help="Directory of .kddf feature sidecars")
    run.add_argument("--out-trajectory", required=True, help="Pose file to write")
    run.add_argument("--out-report", help="Run report file to write")
    _add_config_flags(run)

    pair = commands.add_parser(
        "register-pair", parents=[common], help="RANSAC registration of two scans"
    )
    pair.add_argument("scan_a")
    pair.add_argument("scan_b")
    pair.add_argument("--features-a")
    pair.add_argument("--features-b")
    pair.add_argument("--voxel-size", type=float, default=0.25)
    pair.add_argument("--descriptor-radius", type=float, default=1.0)
    pair.add_argument("--descriptor-bins", type=int, default=11)
    pair.add_argument("--max-keypoints", type=int, default=2000)
    pair.add_argument(
        "--match-mode", choices=[m.value for m in MatchMode], default="mutual"
    )
    pair.add_argument("--max-iterations", type=int, default=50_000)
    pair.add_argument("--inlier-threshold", type=float, default=0.6)
    pair.add_argument("--confidence", type=float, default=0.999)

    rpe = commands.add_parser(
        "eval-rpe", parents=[common], help="KITTI segment relative pose error"
    )
    rpe.add_argument("gt", help="Ground-truth pose file or directory")
    rpe.add_argument("est", help="Estimated pose file or directory")
    rpe.add_argument("--exclude", nargs="*", default=[], help="Sequences to skip")
    rpe.add_argument("--step", type=int, default=1, help="Start frame step")
    rpe.add_argument("--out-lines", help="Write metric,sequence,value lines")

    eval_pair = commands.add_parser(
        "eval-pair", parents=[common], help="Per-pair RTE, RRE and recall"
    )
    eval_pair.add_argument("gt")
    eval_pair.add_argument("est")
    eval_pair.add_argument("--rte-max", type=float, default=DEFAULT_RTE_MAX_CM)
    eval_pair.add_argument("--rre-max", type=float, default=DEFAULT_RRE_MAX_DEG)

    sweep = commands.add_parser(
        "fmr-sweep", parents=[common], help="Feature matching recall grid"
    )
    sweep.add_argument("gt", help="One ground-truth pose per match file")
    sweep.add_argument("matches", nargs="+", help="Putative match files")
    sweep.add_argument("--tau1", type=float, nargs="+", default=[0.1])
    sweep.add_argument("--tau2", type=float, nargs="+", default=[0.05])

    losses = commands.add_parser(
        "losses-check", parents=[common], help="Evaluate descriptor losses"
    )
    losses.add_argument("cloud_a")
    losses.add_argument("cloud_b")
    losses.add_argument("features_a")
    losses.add_argument("features_b")
    losses.add_argument("gt_pose", help="File with the pose mapping a onto b")
    losses.add_argument("--r-p", type=float, default=0.1)
    losses.add_argument("--r-n", type=float, default=1.0)
    losses.add_argument("--m-p", type=float, default=DEFAULT_POSITIVE_MARGIN)
    losses.add_argument("--m-n", type=float, default=DEFAULT_NEGATIVE_MARGIN)
    losses.add_argument("--lambda-p", type=float, default=DEFAULT_LAMBDA_P)

    export = commands.add_parser(
        "map-export", parents=[common], help="Build and write a map from known poses"
    )
    export.add_argument("scan_dir")
    export.add_argument("trajectory")
    export.add_argument("--out-map", required=True)
    _add_config_flags(export)

    return parser.parse_args(argv)


def build_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()

    overrides = {
        key: getattr(args, f"override_{key}")
        for key in PipelineConfig.keys()
        if getattr(args, f"override_{key}", None) is not None
    }
    for key in GLOBAL_KEYS:
        if getattr(args, key) is not None:
            overrides[key] = str(getattr(args, key))

    return apply_overrides(config, overrides)


def dispatch(args: argparse.Namespace) -> int:
    seed = 0 if args.seed is None else args.seed

    match args.command:
        case "run-odometry":
            config = build_config(args)
            return handle_run_odometry(
                config,
                args.scan_dir,
                args.out_trajectory,
                args.features_dir,
                args.out_report,
            )
        case "register-pair":
            return handle_register_pair(
                args.scan_a,
                args.scan_b,
                features_a=args.features_a,
                features_b=args.features_b,
                voxel_size=args.voxel_size,
                descriptor_radius=args.descriptor_radius,
                bins=args.descriptor_bins,
                max_keypoints=args.max_keypoints,
                mode=MatchMode(args.match_mode),
                max_iterations=args.max_iterations,
                inlier_threshold=args.inlier_threshold,
                confidence=args.confidence,
                seed=seed,
            )
        case "eval-rpe":
            return handle_eval_rpe(
                args.gt, args.est, args.exclude, args.step, args.out_lines
            )
        case "eval-pair":
            return handle_eval_pair(args.gt, args.est, args.rte_max, args.rre_max)
        case "fmr-sweep":
            return handle_fmr_sweep(args.gt, args.matches, args.tau1, args.tau2)
        case "losses-check":
            return handle_losses_check(
                args.cloud_a,
                args.cloud_b,
                args.features_a,
                args.features_b,
                args.gt_pose,
                args.r_p,
                args.r_n,
                args.m_p,
                args.m_n,
                args.lambda_p,
            )
        case "map-export":
            config = build_config(args)
            return handle_map_export(
                config, args.scan_dir, args.trajectory, args.out_map
            )
        case _:
            raise ValueError(f"Unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    try:
        if args.threads is not None:
            parallel.set_max_workers(args.threads)
        return dispatch(args)
    except PipelineFailure as e:
        logging.error(str(e))
        return EXIT_PIPELINE_ERROR
    except (KddLoamError, ValueError, OSError) as e:
        logging.error(str(e))
        return EXIT_INPUT_ERROR


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

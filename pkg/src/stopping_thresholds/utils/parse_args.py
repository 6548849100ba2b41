import argparse
import os

COMMANDS = ("solve", "f-curve", "oracle-dp", "check-identity", "discretize", "validate")


def grid_arg(value: str) -> tuple[float, float, int]:
    """Parse "lo:hi:count"."""
    try:
        lo, hi, count = value.split(":")
        grid = (float(lo), float(hi), int(count))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:count, got '{value}'")
    if grid[1] <= grid[0] or grid[2] < 2:
        raise argparse.ArgumentTypeError("grid needs hi > lo and count >= 2")
    return grid


def levels_arg(value: str) -> list[int]:
    try:
        levels = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected n1,n2,..., got '{value}'")
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] < 0:
        raise argparse.ArgumentTypeError("levels must be increasing integers >= 0")
    return levels


def _default_threads() -> int:
    env = os.environ.get("STOPPING_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-l",
        "--log-level",
        default=os.environ.get("STOPPING_LOG_LEVEL", "INFO").upper(),
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Set the logging level (default: INFO)",
    )
    common.add_argument(
        "-c",
        "--config",
        default="config.yaml",
        help="Path to the problem document (default: config.yaml)",
    )
    common.add_argument(
        "-o", "--out", default="out", help="Output directory (default: out)"
    )
    common.add_argument(
        "--seed", type=int, default=None, help="Override the seed in the config"
    )
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Worker threads (default: STOPPING_THREADS or available parallelism)",
    )
    common.add_argument(
        "--grid",
        type=grid_arg,
        default=None,
        help='f-curve grid as "lo:hi:count"',
    )
    common.add_argument(
        "--levels",
        type=levels_arg,
        default=None,
        help='Discretization levels as "n1,n2,..."',
    )
    return common


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="stopping-thresholds",
        description="Threshold rules for one-sided optimal stopping with linear costs",
    )
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "Locate the threshold x_bar and write threshold.json + fcurve.csv",
        "f-curve": "Evaluate f on a grid",
        "oracle-dp": "Value iteration and its agreement with the threshold rule",
        "check-identity": "Ladder-sum and maximum-representation identity checks",
        "discretize": "Solve a sequence of discretized Levy problems",
        "validate": "Model diagnostics for the problem document",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = _default_threads()
    elif args.threads < 1:
        parser.error("--threads must be >= 1")
    return args

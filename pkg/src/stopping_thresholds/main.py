import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from stopping_thresholds.discretize import check_fn_convergence, solve_sequence
from stopping_thresholds.errors import (
    AssumptionViolatedError,
    MethodInapplicableError,
    RootInconclusiveError,
    StoppingError,
)
from stopping_thresholds.ladder import hat_transform
from stopping_thresholds.model import is_skip_free, probe_points, validate_problem
from stopping_thresholds.oracle.dp import dp_threshold_equivalence, solve_dp
from stopping_thresholds.oracle.identities import (
    check_ladder_sum_identity,
    check_max_representation,
)
from stopping_thresholds.reports import (
    RunManifest,
    config_digest,
    discretization_rows,
    dp_payload,
    dp_rows,
    fcurve_rows,
    fn_rows,
    hat_rows,
    render_summary,
    threshold_payload,
    write_csv,
    write_json,
    write_manifest,
)
from stopping_thresholds.settings import (
    AppConfig,
    FiniteChainSpec,
    LevySpec,
    StepDistribution,
)
from stopping_thresholds.threshold import (
    Threshold,
    evaluate_f_curve,
    find_root,
    random_walk_threshold,
    validate_assumption2,
)
from stopping_thresholds.utils.logging import setup_logging
from stopping_thresholds.utils.parse_args import parse_args

logger = logging.getLogger(__name__)

load_dotenv()

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FLAGGED = 2

DEFAULT_GRID_POINTS = 33


class ConfigError(Exception):
    """A problem document that cannot be read, anchored to a line."""


def _line_of(path: str, loc: tuple) -> int | None:
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    try:
        with open(path, "r") as f:
            lines = f.readlines()
    except OSError:
        return None
    # the innermost named field, in either JSON or YAML spelling
    for key in reversed(keys):
        for i, line in enumerate(lines, start=1):
            if f'"{key}"' in line or line.lstrip().startswith(f"{key}:"):
                return i
    return None


def load_config(path: str) -> AppConfig:
    try:
        return AppConfig.load(path)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}")
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{path}:{line}: {getattr(e, 'problem', None) or e}")
    except ValidationError as e:
        first = e.errors()[0]
        line = _line_of(path, first["loc"]) or 1
        where = ".".join(str(k) for k in first["loc"])
        raise ConfigError(f"{path}:{line}: {where}: {first['msg']}")
    except ValueError as e:
        raise ConfigError(f"{path}:1: {e}")


def _apply_overrides(cfg: AppConfig, args) -> AppConfig:
    update = {"threads": args.threads}
    if args.seed is not None:
        update["seed"] = args.seed % 2**64
    return cfg.model_copy(update={"mc": cfg.mc.model_copy(update=update)})


def _grid(cfg: AppConfig, args) -> np.ndarray:
    if args.grid is not None:
        lo, hi, count = args.grid
    elif cfg.solve.grid is not None:
        lo, hi, count = cfg.solve.grid
    else:
        lo, hi = cfg.solve.bracket
        count = DEFAULT_GRID_POINTS
    if isinstance(cfg.process, FiniteChainSpec):
        # f is defined on the states only; the top state has no ladder epoch
        states = np.asarray(cfg.process.states[:-1])
        return states[(states >= lo) & (states <= hi)]
    return np.linspace(lo, hi, int(count))


def _threshold(cfg: AppConfig) -> Threshold:
    p = cfg.problem
    if isinstance(p.process, StepDistribution):
        return random_walk_threshold(
            p.process, p, cfg.mc, bracket=cfg.solve.bracket, tol=min(cfg.solve.tol, 1e-9)
        )
    return find_root(p, cfg.solve.bracket, cfg.mc, tol=cfg.solve.tol)


def _threshold_status(threshold: Threshold) -> str:
    a2 = threshold.assumption2.status if threshold.assumption2 else "ok"
    if a2 in ("violated", "inconclusive"):
        return f"assumption2 {a2}"
    if threshold.boundary_inconclusive or not threshold.converged:
        return "inconclusive"
    return "ok"


def _pooled(cfg: AppConfig) -> bool:
    proc = cfg.process
    return isinstance(proc, StepDistribution) and not is_skip_free(proc)


# --- subcommands -----------------------------------------------------------------------


def cmd_solve(cfg: AppConfig, args, out: Path, manifest: RunManifest):
    threshold = _threshold(cfg)
    curve = evaluate_f_curve(cfg.problem, _grid(cfg, args), cfg.mc, pooled=_pooled(cfg))
    files = [
        write_json(out / "threshold.json", manifest, threshold_payload(threshold)),
        write_csv(out / "fcurve.csv", manifest, *fcurve_rows(curve)),
    ]
    status = _threshold_status(threshold)
    items = {
        "x_bar": threshold.x_bar,
        "boundary": threshold.boundary,
        "f(x_bar)": threshold.f_at_root,
        "method": threshold.method,
    }
    return files, status, items


def cmd_f_curve(cfg: AppConfig, args, out: Path, manifest: RunManifest):
    p = cfg.problem
    grid = _grid(cfg, args)
    curve = evaluate_f_curve(p, grid, cfg.mc, pooled=_pooled(cfg))
    files = [write_csv(out / "fcurve.csv", manifest, *fcurve_rows(curve))]
    try:
        report = validate_assumption2(curve)
        status = "ok" if report.status == "certified" else f"assumption2 {report.status}"
    except StoppingError as e:
        report, status = {"status": e.code, "message": str(e)}, f"assumption2 {e.code}"
    payload = {"variant": curve.variant, "method": curve.method, "assumption2": report}
    if isinstance(p.process, LevySpec):
        hat = hat_transform(p.process, p.cost, grid, cfg.mc)
        files.append(write_csv(out / "hat.csv", manifest, *hat_rows(hat)))
        payload["hat_calibration"] = {
            "method": hat.method,
            "constant": hat.calibration_constant,
            "sensitivity": hat.calibration_sensitivity,
            "passage_additivity": hat.passage_additivity,
        }
    files.append(write_json(out / "fcurve.json", manifest, payload))
    items = {"points": grid.size, "variant": curve.variant, "method": curve.method}
    return files, status, items


def cmd_oracle_dp(cfg: AppConfig, args, out: Path, manifest: RunManifest):
    p = cfg.problem
    if isinstance(p.process, LevySpec):
        raise MethodInapplicableError("value iteration needs a lattice walk or a chain")
    threshold = _threshold(cfg)
    guess = threshold.x_bar if math.isfinite(threshold.x_bar) else cfg.solve.bracket[0]
    solution = solve_dp(
        p, guess, tol=cfg.dp.tol, lower_boundary=cfg.dp.lower_boundary, domain=cfg.dp.domain
    )
    verdict = dp_threshold_equivalence(solution, threshold)
    files = [
        write_csv(out / "dp.csv", manifest, *dp_rows(solution)),
        write_json(
            out / "dp.json",
            manifest,
            {
                "dp": dp_payload(solution),
                "equivalence": verdict,
                "threshold": threshold_payload(threshold),
            },
        ),
    ]
    status = "ok" if verdict.matches else "stopping set mismatch"
    items = {"x_bar": threshold.x_bar, "sweeps": solution.iterations, "verdict": verdict.verdict}
    return files, status, items


def cmd_check_identity(cfg: AppConfig, args, out: Path, manifest: RunManifest):
    p = cfg.problem
    reports = {}
    if isinstance(p.process, LevySpec):
        y = cfg.identity.y if cfg.identity.y is not None else _threshold(cfg).x_bar
        x = cfg.identity.x if cfg.identity.x is not None else y - 1.0
        reports["max_representation"] = check_max_representation(p.process, p, x, y, cfg.mc)
    else:
        y = cfg.identity.y if cfg.identity.y is not None else _threshold(cfg).x_bar
        x = cfg.identity.x if cfg.identity.x is not None else min(0.0, y)
        for convention in ("strict", "nonstrict"):
            reports[f"ladder_sum_{convention}"] = check_ladder_sum_identity(
                p, x, y, cfg.mc, convention
            )
    files = [write_json(out / "identity.json", manifest, {"x": x, "y": y, **reports})]
    # the nonstrict ladder sum carries the extra epoch term by construction
    checked = [r for k, r in reports.items() if k != "ladder_sum_nonstrict"]
    status = "ok" if all(r.passed for r in checked) else "identity residual beyond 3 stderr"
    items = {f"{k}.z": r.z for k, r in reports.items()}
    return files, status, items


def cmd_discretize(cfg: AppConfig, args, out: Path, manifest: RunManifest):
    p = cfg.problem
    if not isinstance(p.process, LevySpec):
        raise MethodInapplicableError("discretization needs a Levy process")
    levy = p.process
    levels = args.levels or cfg.discretize.levels
    report = solve_sequence(
        levy,
        p,
        levels,
        cfg.discretize.probes,
        cfg.mc,
        scheme=cfg.discretize.scheme,
        working_range=cfg.discretize.range,
        bracket=cfg.solve.bracket,
    )
    files = [
        write_json(out / "discretization.json", manifest, {"report": report}),
        write_csv(out / "discretization.csv", manifest, *discretization_rows(report)),
    ]
    if levy.kind == "bm_drift":
        conv = check_fn_convergence(levy, p, levels, report.probes, cfg.mc)
        files += [
            write_json(out / "fn_convergence.json", manifest, {"convergence": conv}),
            write_csv(out / "fn_convergence.csv", manifest, *fn_rows(conv)),
        ]
    ok = report.monotone_values_ok and report.monotone_thresholds_ok
    status = "ok" if ok else "monotonicity violated"
    items = {"limit_estimate": report.limit_estimate, "order": report.richardson_order}
    for n, x in zip(report.levels, report.thresholds):
        items[f"x_bar_{n}"] = x
    return files, status, items


def cmd_validate(cfg: AppConfig, args, out: Path, manifest: RunManifest):
    diagnostics = validate_problem(cfg.problem, cfg.mc, cfg.probes)
    files = [
        write_json(
            out / "diagnostics.json",
            manifest,
            {"diagnostics": diagnostics, "passed": diagnostics.passed},
        )
    ]
    for x0, x1 in diagnostics.payoff_violations[:10]:
        logger.warning("gamma decreases between %.6g and %.6g", x0, x1)
    status = "ok" if diagnostics.passed else "validation failed"
    items = {
        "drift": diagnostics.drift,
        "probes": probe_points(cfg.probes).size,
        "payoff_violations": len(diagnostics.payoff_violations),
        "warnings": len(diagnostics.warnings),
    }
    return files, status, items


COMMANDS = {
    "solve": cmd_solve,
    "f-curve": cmd_f_curve,
    "oracle-dp": cmd_oracle_dp,
    "check-identity": cmd_check_identity,
    "discretize": cmd_discretize,
    "validate": cmd_validate,
}


def run(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    setup_logging(args.log_level)

    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_ERROR

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=args.command,
        config_path=args.config,
        out_dir=str(out),
        seed=cfg.mc.seed,
        config_sha256=config_digest(args.config),
    )

    code = EXIT_OK
    try:
        files, status, items = COMMANDS[args.command](cfg, args, out, manifest)
        if status != "ok":
            code = EXIT_FLAGGED
            logger.warning("%s: %s", args.command, status)
    except (AssumptionViolatedError, RootInconclusiveError) as e:
        payload = {"error": {"code": e.code, "message": str(e)}}
        if isinstance(e, RootInconclusiveError):
            payload["error"]["bracket"] = e.bracket
        files = [write_json(out / "error.json", manifest, payload)]
        status, items, code = e.code, {"message": str(e)}, EXIT_FLAGGED
        logger.warning("%s: %s", args.command, e)
    except StoppingError as e:
        logger.error("%s failed [%s]: %s", args.command, e.code, e)
        return EXIT_ERROR
    except ValueError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_ERROR

    files.append(render_summary(out, manifest, status, items))
    write_manifest(out, manifest, files)
    logger.info("%s finished (%s), outputs in %s", args.command, status, out)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

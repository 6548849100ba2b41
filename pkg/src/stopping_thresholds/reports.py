"""
Output files of a CLI run.

Every CSV starts with a `# manifest ...` comment line and every JSON document
carries a `manifest` object, so each artifact names the command, seed, version
and config hash that produced it. The wall-clock time is only written to
manifest.json; the other files are byte-identical across re-runs.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from jinja2 import Template

from stopping_thresholds import __version__

logger = logging.getLogger(__name__)

TEMPLATE_PATH = Path(__file__).parent / "templates" / "summary.txt.j2"


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    out_dir: str
    seed: int
    version: str = __version__
    config_sha256: str = ""

    def as_dict(self) -> dict:
        return {
            "command": self.command,
            "config": os.path.basename(self.config_path),
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "version": self.version,
        }

    def comment_line(self) -> str:
        fields = " ".join(f"{k}={v}" for k, v in self.as_dict().items())
        return f"# manifest {fields}"


def config_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def fmt(value) -> str:
    """17 significant digits, '.' decimal point."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    if value is None:
        return ""
    x = float(value)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: to_jsonable(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if f.repr
        }
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no literal for non-finite numbers
        return x if math.isfinite(x) else fmt(x)
    if hasattr(obj, "model_dump"):
        return to_jsonable(obj.model_dump())
    return obj


def write_csv(
    path: Path, manifest: RunManifest, header: list[str], rows: list[list]
) -> Path:
    with open(path, "w", newline="") as f:
        f.write(manifest.comment_line() + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    logger.debug("Wrote %s (%d rows)", path, len(rows))
    return path


def write_json(path: Path, manifest: RunManifest, payload: dict) -> Path:
    document = {"manifest": manifest.as_dict(), **to_jsonable(payload)}
    with open(path, "w", newline="") as f:
        f.write(json.dumps(document, sort_keys=True, indent=2))
        f.write("\n")
    logger.debug("Wrote %s", path)
    return path


def write_manifest(out_dir: Path, manifest: RunManifest, files: list[Path]) -> Path:
    document = {
        **manifest.as_dict(),
        "config_path": manifest.config_path,
        "out_dir": manifest.out_dir,
        "files": sorted(p.name for p in files),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", newline="") as f:
        f.write(json.dumps(document, sort_keys=True, indent=2))
        f.write("\n")
    return path


def render_summary(
    out_dir: Path, manifest: RunManifest, status: str, items: dict[str, object]
) -> Path:
    try:
        with open(TEMPLATE_PATH, "r") as f:
            template = Template(f.read())
    except OSError as e:
        logger.error(f"Failed to load summary template: {e}")
        raise
    text = template.render(
        manifest=manifest.as_dict(),
        status=status,
        items=[(k, fmt(v) if not isinstance(v, str) else v) for k, v in items.items()],
    )
    path = out_dir / "summary.txt"
    with open(path, "w", newline="") as f:
        f.write(text)
    return path


# --- payloads --------------------------------------------------------------------------


def threshold_payload(threshold) -> dict:
    return {
        "x_bar": threshold.x_bar,
        "boundary": threshold.boundary,
        "f_at_root": threshold.f_at_root,
        "ci": threshold.ci,
        "assumption2": threshold.assumption2,
        "bracket": threshold.bracket,
    }


def fcurve_rows(curve) -> tuple[list[str], list[list]]:
    rows = [
        [y, f, f - ci, f + ci, curve.variant]
        for y, f, ci in zip(curve.grid, curve.f_values, curve.ci_halfwidths)
    ]
    return ["y", "f", "ci_low", "ci_high", "variant"], rows


def hat_rows(hat) -> tuple[list[str], list[list]]:
    rows = [
        [y, v, v - ci, v + ci, hat.method]
        for y, v, ci in zip(hat.grid, hat.values, hat.ci_halfwidths)
    ]
    return ["y", "h_hat", "ci_low", "ci_high", "method"], rows


def dp_rows(solution) -> tuple[list[str], list[list]]:
    rows = [
        [s, v, g, bool(stop)]
        for s, v, g, stop in zip(
            solution.states, solution.values, solution.gamma, solution.stopping_set
        )
    ]
    return ["state", "V", "gamma", "stopping"], rows


def dp_payload(solution) -> dict:
    states = solution.states[solution.stopping_set & solution.interior()]
    return {
        "iterations": solution.iterations,
        "residual": solution.residual,
        "lower_boundary": solution.lower_boundary,
        "boundary_layer": solution.boundary_layer,
        "domain": solution.domain,
        "stopping_set_min": float(states.min()) if states.size else None,
        "stopping_set_size": int(states.size),
    }


def discretization_rows(report) -> tuple[list[str], list[list]]:
    header = ["level", "delta", "x_bar_n"]
    header += [f"V_n({fmt(y)})" for y in report.probes]
    header += [f"V_n_stderr({fmt(y)})" for y in report.probes]
    if report.f_residuals is not None:
        header += [f"f_residual({fmt(y)})" for y in report.probes]
    rows = []
    for i, n in enumerate(report.levels):
        row = [n, report.deltas[i], report.thresholds[i]]
        row += report.values[i] + report.value_stderrs[i]
        if report.f_residuals is not None:
            row += report.f_residuals[i]
        rows.append(row)
    return header, rows


def fn_rows(conv) -> tuple[list[str], list[list]]:
    rows = []
    for i, n in enumerate(conv.levels):
        for j, y in enumerate(conv.probes):
            rows.append(
                [n, conv.deltas[i], y, conv.f_n[i][j], conv.targets[j], conv.residuals[i][j]]
            )
    return ["level", "delta", "x", "f_n", "target", "residual"], rows

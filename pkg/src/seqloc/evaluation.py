"""Run metrics and reports: position/yaw error statistics, success-rate
curves, per-method comparison tables, and mode-distribution summaries.

All statistics are computed over the post-convergence segment of a trace,
matching the evaluation protocol of sequential global localization (the
filter gets a convergence grace period before its estimates count).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "RunResult",
    "NoConvergedSegmentError",
    "THRESHOLD_GRID",
    "errors",
    "aggregate",
    "success_rate",
    "success_grid",
    "mode_ratio",
    "ms_per_frame",
    "report",
]

# standard success-rate thresholds, meters and degrees
THRESHOLD_GRID = (2, 5, 10, 15, 20, 25, 30)


class NoConvergedSegmentError(ValueError):
    """The run has no post-convergence records to evaluate."""


@dataclass
class RunResult:
    records: list[dict]
    params: dict = field(default_factory=dict)
    converged_step: int | None = None

    def __post_init__(self):
        steps = [r["step"] for r in self.records]
        if steps != sorted(steps):
            raise ValueError("records must be ordered by step")
        if self.converged_step is None:
            for r in self.records:
                if r.get("converged"):
                    self.converged_step = r["step"]
                    break

    def converged_records(self) -> list[dict]:
        if self.converged_step is None:
            return []
        return [r for r in self.records if r["step"] >= self.converged_step]


def _wrap_deg(a: np.ndarray) -> np.ndarray:
    return (a + 180.0) % 360.0 - 180.0


def errors(run: RunResult) -> np.ndarray:
    """(n, 2) array of per-step (xy position error m, |yaw error| deg) for
    steps at or after convergence."""
    recs = run.converged_records()
    if not recs:
        raise NoConvergedSegmentError("no converged segment")
    est = np.array([r["est_pose"] for r in recs], dtype=float)
    tru = np.array([r["true_pose"] for r in recs], dtype=float)
    pe = np.hypot(est[:, 0] - tru[:, 0], est[:, 1] - tru[:, 1])
    ye = np.abs(_wrap_deg(np.degrees(est[:, 3] - tru[:, 3])))
    return np.column_stack([pe, ye])


def z_error_mean(run: RunResult) -> float:
    """Mean absolute height error; the planar metrics exclude z on purpose."""
    recs = run.converged_records()
    if not recs:
        raise NoConvergedSegmentError("no converged segment")
    est = np.array([r["est_pose"][2] for r in recs], dtype=float)
    tru = np.array([r["true_pose"][2] for r in recs], dtype=float)
    return float(np.mean(np.abs(est - tru)))


def aggregate(errs: np.ndarray) -> tuple[float, float, float, float]:
    """(pe_mean, pe_rmse, ye_mean, ye_rmse)."""
    errs = np.asarray(errs, dtype=float)
    if errs.size == 0:
        raise ValueError("empty error list")
    pe, ye = errs[:, 0], errs[:, 1]
    return (
        float(pe.mean()),
        float(np.sqrt(np.mean(pe**2))),
        float(ye.mean()),
        float(np.sqrt(np.mean(ye**2))),
    )


def success_rate(errs: np.ndarray, x_m: float | None, y_deg: float | None) -> float:
    """Fraction of steps with pe < x_m and ye < y_deg (strict); pass None to
    marginalize one condition."""
    errs = np.asarray(errs, dtype=float)
    if errs.size == 0:
        raise ValueError("empty error list")
    ok = np.ones(len(errs), dtype=bool)
    if x_m is not None:
        ok &= errs[:, 0] < x_m
    if y_deg is not None:
        ok &= errs[:, 1] < y_deg
    return float(np.mean(ok))


def success_grid(errs: np.ndarray, grid=THRESHOLD_GRID) -> np.ndarray:
    """len(grid) x len(grid) matrix of success rates, position by row, yaw by
    column."""
    return np.array(
        [[success_rate(errs, x, y) for y in grid] for x in grid]
    )


def mode_ratio(run: RunResult) -> float:
    """Fraction of post-convergence steps spent in registration mode."""
    recs = run.converged_records()
    if not recs:
        return 0.0
    return sum(r["mode"] == "reg" for r in recs) / len(recs)


def ms_per_frame(run: RunResult) -> float:
    if not run.records:
        raise ValueError("empty run")
    return float(np.mean([r["wall_time_ms"] for r in run.records]))


CSV_COLUMNS = [
    "method", "scene", "pe_mean", "pe_rmse", "ye_mean", "ye_rmse",
    "r2m5d", "reg_ratio", "ms_per_frame",
]


def _row(method: str, scene: str, run: RunResult) -> dict:
    try:
        errs = errors(run)
        pe_mean, pe_rmse, ye_mean, ye_rmse = aggregate(errs)
        r2m5d = success_rate(errs, 2, 5)
    except NoConvergedSegmentError:
        pe_mean = pe_rmse = ye_mean = ye_rmse = r2m5d = math.nan
    return {
        "method": method,
        "scene": scene,
        "pe_mean": pe_mean,
        "pe_rmse": pe_rmse,
        "ye_mean": ye_mean,
        "ye_rmse": ye_rmse,
        "r2m5d": r2m5d,
        "reg_ratio": mode_ratio(run),
        "ms_per_frame": ms_per_frame(run),
    }


def report(runs: list[tuple[str, str, RunResult]], out_dir) -> list[Path]:
    """Write the comparison table (CSV), the full success curves (JSON), and
    one success-curve figure per scene (PNG). Returns the written paths.

    The JSON layout is:
      {"schema": "seqloc-curves", "version": 1, "grid": [...],
       "scenes": {scene: {method: {"matrix": [[rate]],  # position x yaw
                                   "r_at_xm": [rate],   # yaw fixed at 5 deg
                                   "z_error_mean": float | null}}}}
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for method, scene, run in runs:
            w.writerow(_row(method, scene, run))
    written.append(csv_path)

    scenes: dict[str, dict] = {}
    for method, scene, run in runs:
        entry: dict = {"matrix": None, "r_at_xm": None, "z_error_mean": None}
        try:
            errs = errors(run)
            entry["matrix"] = success_grid(errs).tolist()
            y5 = THRESHOLD_GRID.index(5)
            entry["r_at_xm"] = [row[y5] for row in entry["matrix"]]
            entry["z_error_mean"] = z_error_mean(run)
        except NoConvergedSegmentError:
            pass
        scenes.setdefault(scene, {})[method] = entry
    curves = {
        "schema": "seqloc-curves",
        "version": 1,
        "grid": list(THRESHOLD_GRID),
        "scenes": scenes,
    }
    json_path = out_dir / "curves.json"
    json_path.write_text(json.dumps(curves, indent=2, sort_keys=True))
    written.append(json_path)

    for scene, methods in scenes.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method, entry in sorted(methods.items()):
            if entry["r_at_xm"] is None:
                continue
            ax.plot(THRESHOLD_GRID, entry["r_at_xm"], marker="o", label=method)
        ax.set_xlabel("position threshold [m]")
        ax.set_ylabel("success rate (yaw < 5 deg)")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(scene)
        ax.grid(True, alpha=0.3)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig_path = out_dir / f"curves_{scene}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(fig_path)

    return written

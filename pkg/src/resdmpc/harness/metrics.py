"""Per-step records, run summaries and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass
class GridStep:
    """One grid during one step; ``state`` is the state at the start of the step."""

    state: np.ndarray
    input: np.ndarray
    attack: np.ndarray
    a_star: np.ndarray
    mu_g: float
    sigma_g: float
    detected: bool
    stage_cost: float
    violation: bool
    fallback: str | None = None


@dataclass
class StepRecord:
    step: int
    time_h: float
    grids: dict[str, GridStep]


@dataclass
class GridSummary:
    grid: str
    total_cost: float
    violations: int
    detections: int
    final_mu_g: float
    final_sigma_g: float


def summarize(records: Sequence[StepRecord], terminal: Mapping[str, float] | None = None,
              grids: Iterable[str] | None = None) -> dict[str, GridSummary]:
    terminal = terminal or {}
    names = list(grids) if grids is not None else (list(records[0].grids) if records else list(terminal))
    out = {}
    for g in names:
        rows = [r.grids[g] for r in records if g in r.grids]
        out[g] = GridSummary(
            grid=g,
            total_cost=float(sum(r.stage_cost for r in rows) + terminal.get(g, 0.0)),
            violations=sum(bool(r.violation) for r in rows),
            detections=sum(bool(r.detected) for r in rows),
            final_mu_g=float(rows[-1].mu_g) if rows else 0.0,
            final_sigma_g=float(rows[-1].sigma_g) if rows else 0.0,
        )
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trace_header(neighbors: Sequence[str]) -> list[str]:
    channels = ["g", "m"] + [f"tr_{n}" for n in neighbors]
    return (["step", "time_h", "soc", "p_g", "p_m"] + [f"p_tr_{n}" for n in neighbors]
            + [f"u_{c}" for c in channels] + [f"a_true_{c}" for c in channels]
            + [f"a_star_{c}" for c in channels]
            + ["mu_g", "sigma_g", "detected", "stage_cost", "violation"])


def write_trace(path: str | Path, grid: str, neighbors: Sequence[str], records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(neighbors))
        for r in records:
            g = r.grids[grid]
            w.writerow([_fmt(r.step), _fmt(r.time_h)]
                       + [_fmt(v) for v in g.state] + [_fmt(v) for v in g.input]
                       + [_fmt(v) for v in g.attack] + [_fmt(v) for v in g.a_star]
                       + [_fmt(g.mu_g), _fmt(g.sigma_g), _fmt(g.detected), _fmt(g.stage_cost),
                          _fmt(g.violation)])


SUMMARY_HEADER = ["grid", "total_cost", "violations", "detections", "final_mu_g", "final_sigma_g"]


def write_summary(path: str | Path, summary: Mapping[str, GridSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summary.values():
            w.writerow([s.grid, _fmt(s.total_cost), s.violations, s.detections,
                        _fmt(s.final_mu_g), _fmt(s.final_sigma_g)])


def read_summary(path: str | Path) -> dict[str, GridSummary]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {r["grid"]: GridSummary(r["grid"], float(r["total_cost"]), int(r["violations"]),
                                   int(r["detections"]), float(r["final_mu_g"]),
                                   float(r["final_sigma_g"])) for r in rows}


def format_table(summary: Mapping[str, GridSummary]) -> str:
    lines = [f"{'grid':<6}{'total_cost':>14}{'violations':>12}{'detections':>12}"
             f"{'mu_g':>10}{'sigma_g':>10}"]
    for s in summary.values():
        lines.append(f"{s.grid:<6}{s.total_cost:>14.1f}{s.violations:>12d}{s.detections:>12d}"
                     f"{s.final_mu_g:>10.4f}{s.final_sigma_g:>10.4f}")
    return "\n".join(lines)

"""Post-hoc analysis: reset repeatability statistics, per-cell success tables,
and edge-boundary detection over ordered perturbation sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .geometry import wrap_180
from .orchestrator import TrialMatrixConfig
from .types import GraspType, PerturbAxis, TrialRecord


class AnalysisError(Exception):
    pass


class InsufficientData(AnalysisError):
    pass


class UnmappedRecord(AnalysisError):
    pass


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class RepeatabilityReport:
    n: int
    std_x: float
    std_y: float
    mean_std_xy: float
    std_theta: float
    failures: int
    # informational only: spread of per-trial deviation magnitudes
    std_of_planar_dev: float = 0.0


def repeatability_stats(records: Iterable[TrialRecord]) -> RepeatabilityReport:
    """Sample standard deviations of the reset pose across completed trials.

    x/y stds use the n-1 denominator; the heading deviation is taken on the
    circle (shortest signed difference from each trial's target angle) to
    avoid 0/360 wraparound artifacts.
    """
    recs = list(records)
    failures = sum(1 for r in recs if r.aborted)
    ok = [r for r in recs if not r.aborted]
    if len(ok) < 2:
        raise InsufficientData(f"need at least 2 completed trials, have {len(ok)}")
    xs = np.array([r.reset_pose.x for r in ok])
    ys = np.array([r.reset_pose.y for r in ok])
    dthetas = np.array([wrap_180(r.reset_pose.theta - r.spec.object_angle) for r in ok])
    std_x = float(np.std(xs, ddof=1))
    std_y = float(np.std(ys, ddof=1))
    planar = np.hypot(xs - xs.mean(), ys - ys.mean())
    return RepeatabilityReport(
        n=len(ok),
        std_x=std_x,
        std_y=std_y,
        mean_std_xy=(std_x + std_y) / 2.0,
        std_theta=float(np.std(dthetas, ddof=1)),
        failures=failures,
        std_of_planar_dev=float(np.std(planar, ddof=1)),
    )


@dataclass
class CellStats:
    angles: tuple[float, ...]
    n: int = 0
    successes: int = 0

    @property
    def rate_percent(self) -> int:
        if self.n == 0:
            return 0
        return round_half_up(100.0 * self.successes / self.n)


@dataclass
class SuccessTable:
    # (perturb_axis, grasp_type) -> object_id -> CellStats
    cells: dict[tuple[PerturbAxis, GraspType], dict[str, CellStats]]
    objects: tuple[str, ...]
    total: int
    total_successes: int

    @property
    def overall_percent(self) -> int:
        if self.total == 0:
            return 0
        return round_half_up(100.0 * self.total_successes / self.total)


def success_table(records: Iterable[TrialRecord], cfg: TrialMatrixConfig) -> SuccessTable:
    """Aggregate per (axis, grasp) x object success rates; counts partition the records."""
    cells: dict[tuple[PerturbAxis, GraspType], dict[str, CellStats]] = {}
    for row in cfg.rows:
        key = (row.perturb_axis, row.grasp_type)
        cells[key] = {oid: CellStats(angles=row.angles[oid]) for oid in cfg.objects
                      if oid in row.angles}
    total = 0
    total_successes = 0
    for rec in records:
        key = (rec.spec.perturb_axis, rec.spec.grasp_type)
        cell_row = cells.get(key)
        if cell_row is None or rec.spec.object_id not in cell_row:
            raise UnmappedRecord(
                f"trial {rec.spec.trial_id}: no matrix cell for "
                f"({rec.spec.perturb_axis.value}, {rec.spec.grasp_type.value}, "
                f"{rec.spec.object_id})"
            )
        cell = cell_row[rec.spec.object_id]
        cell.n += 1
        total += 1
        if rec.success and not rec.aborted:
            cell.successes += 1
            total_successes += 1
    return SuccessTable(
        cells=cells, objects=cfg.objects, total=total, total_successes=total_successes
    )


class EdgeKind(str, Enum):
    BOUNDARY = "boundary"
    NO_TRANSITION = "no_transition"
    NON_MONOTONE = "non_monotone"


@dataclass(frozen=True)
class EdgeResult:
    kind: EdgeKind
    boundary: Optional[float] = None
    low_value: Optional[float] = None
    high_value: Optional[float] = None
    violation_indices: tuple[int, ...] = ()


def edge_boundary(records: list[TrialRecord]) -> EdgeResult:
    """Locate the success->failure transition along one ordered perturbation sweep.

    Records must belong to one (object, angle, axis, grasp) cell with strictly
    increasing perturbation values.
    """
    if not records:
        raise InsufficientData("no records for edge analysis")
    cell = {(r.spec.object_id, r.spec.object_angle, r.spec.perturb_axis, r.spec.grasp_type)
            for r in records}
    if len(cell) != 1:
        raise UnmappedRecord("edge analysis needs records from exactly one cell")
    values = [r.spec.perturb_value for r in records]
    for a, b in zip(values, values[1:]):
        if b <= a:
            raise InsufficientData("perturbation values must be strictly increasing")
    succ = [bool(r.success) and not r.aborted for r in records]
    violations = tuple(
        i + 1 for i in range(len(succ) - 1) if (not succ[i]) and succ[i + 1]
    )
    if violations:
        return EdgeResult(kind=EdgeKind.NON_MONOTONE, violation_indices=violations)
    transitions = [i for i in range(len(succ) - 1) if succ[i] and not succ[i + 1]]
    if not transitions:
        return EdgeResult(kind=EdgeKind.NO_TRANSITION)
    i = transitions[0]
    return EdgeResult(
        kind=EdgeKind.BOUNDARY,
        boundary=(values[i] + values[i + 1]) / 2.0,
        low_value=values[i],
        high_value=values[i + 1],
    )


def edge_cells(records: Iterable[TrialRecord]) -> dict[tuple, list[TrialRecord]]:
    """Group records into (object, angle, axis, grasp) sweeps sorted by value."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        key = (r.spec.object_id, r.spec.object_angle, r.spec.perturb_axis, r.spec.grasp_type)
        groups.setdefault(key, []).append(r)
    for recs in groups.values():
        recs.sort(key=lambda r: r.spec.perturb_value)
    return groups


# ---------------------------------------------------------------------------
# plain-text / csv rendering

def format_repeatability(rep: RepeatabilityReport) -> str:
    lines = [
        f"resets analyzed        {rep.n}",
        f"mechanism failures     {rep.failures}",
        f"std x                  {rep.std_x:.4f} mm",
        f"std y                  {rep.std_y:.4f} mm",
        f"mean std (x,y)         {rep.mean_std_xy:.4f} mm",
        f"std heading            {rep.std_theta:.3f} deg",
        f"std of planar dev      {rep.std_of_planar_dev:.4f} mm (informational)",
    ]
    return "\n".join(lines)


def format_success_table(table: SuccessTable, as_csv: bool = False) -> str:
    header = ["perturb_axis", "grasp_type"]
    for oid in table.objects:
        header += [f"{oid}_angles", f"{oid}_rate_pct", f"{oid}_n"]
    rows = []
    for (axis, grasp), by_obj in table.cells.items():
        row = [axis.value, grasp.value]
        for oid in table.objects:
            cell = by_obj.get(oid)
            if cell is None:
                row += ["-", "-", "0"]
            else:
                row += [
                    "/".join(f"{a:g}" for a in cell.angles),
                    str(cell.rate_percent),
                    str(cell.n),
                ]
        rows.append(row)
    summary = f"overall {table.overall_percent}% ({table.total_successes}/{table.total})"
    if as_csv:
        out = [",".join(header)] + [",".join(r) for r in rows]
        return "\n".join(out) + f"\n# {summary}"
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header)] + [fmt.format(*r) for r in rows]
    return "\n".join(out) + "\n" + summary


def format_edges(groups: dict[tuple, list[TrialRecord]], as_csv: bool = False) -> str:
    header = ["object", "angle", "perturb_axis", "grasp_type", "result", "boundary"]
    rows = []
    for (oid, angle, axis, grasp), recs in sorted(
        groups.items(), key=lambda kv: (kv[0][2].value, kv[0][3].value, kv[0][0], kv[0][1])
    ):
        res = edge_boundary(recs)
        if res.kind is EdgeKind.BOUNDARY:
            detail = f"{res.boundary:.3f}"
        elif res.kind is EdgeKind.NON_MONOTONE:
            detail = "at " + ",".join(str(i) for i in res.violation_indices)
        else:
            detail = "-"
        rows.append([oid, f"{angle:g}", axis.value, grasp.value, res.kind.value, detail])
    if as_csv:
        return "\n".join([",".join(header)] + [",".join(r) for r in rows])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*header)] + [fmt.format(*r) for r in rows])

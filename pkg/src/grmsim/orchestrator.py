"""Trial orchestration: the per-trial state machine, CSV trial loading,
matrix-driven trial generation, and sequential batch execution.

One physical rig is modeled, so trials run strictly sequentially. Each trial
walks SwapIfNeeded -> Reset -> PlanGrasp -> ExecuteGrasp -> Evaluate ->
Record -> Done, aborting to Aborted on any device/arm/log fault. Per-trial
noise seeds are batch_seed XOR trial_id so any single trial reproduces in
isolation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import records
from .datalog import DatalogError, SessionWriter
from .manipulator import GripperModel, UnsupportedCombination, plan_grasp
from .protocol import ActionClient, ActionTimeout, OpCode, ProtocolError
from .types import (
    GraspType,
    ObjectSpec,
    PerturbAxis,
    Pose2D,
    Pose6D,
    TrialRecord,
    TrialSpec,
    grasp_succeeded,
)

CSV_COLUMNS = [
    "trial_id", "object", "object_angle_deg", "grasp_type",
    "perturb_axis", "perturb_value", "collect_data",
]


class TrialPhase(str, Enum):
    SWAP_IF_NEEDED = "swap_if_needed"
    RESET = "reset"
    PLAN_GRASP = "plan_grasp"
    EXECUTE_GRASP = "execute_grasp"
    EVALUATE = "evaluate"
    RECORD = "record"
    DONE = "done"
    ABORTED = "aborted"


PHASE_ORDER = [
    TrialPhase.SWAP_IF_NEEDED,
    TrialPhase.RESET,
    TrialPhase.PLAN_GRASP,
    TrialPhase.EXECUTE_GRASP,
    TrialPhase.EVALUATE,
    TrialPhase.RECORD,
    TrialPhase.DONE,
]


def phase_trace_legal(trace: list[TrialPhase]) -> bool:
    """A trace is legal when it follows the phase order, ending in Done or Aborted."""
    if not trace:
        return False
    idx = -1
    for i, phase in enumerate(trace):
        if phase is TrialPhase.ABORTED:
            return i == len(trace) - 1
        k = PHASE_ORDER.index(phase)
        if k <= idx:
            return False
        idx = k
    return trace[-1] is TrialPhase.DONE


# ---------------------------------------------------------------------------
# faults

class TrialFault(Exception):
    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DeviceFault(TrialFault):
    pass


class ArmFault(TrialFault):
    pass


class LogFault(TrialFault):
    pass


# ---------------------------------------------------------------------------
# trial matrix

class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class TrialMatrixRow:
    perturb_axis: PerturbAxis
    range_lo: float
    range_hi: float
    grasp_type: GraspType
    angles: dict[str, tuple[float, ...]]  # object_id -> platform angles (deg)


@dataclass(frozen=True)
class TrialMatrixConfig:
    rows: tuple[TrialMatrixRow, ...]
    objects: tuple[str, ...]
    samples_per_config: int = 15

    def validate(self) -> None:
        if self.samples_per_config < 1:
            raise InvalidConfig("samples_per_config must be >= 1")
        if not self.rows:
            raise InvalidConfig("matrix has no rows")
        known = set(self.objects)
        for row in self.rows:
            if row.range_lo >= row.range_hi:
                raise InvalidConfig(
                    f"range {row.range_lo}..{row.range_hi} for {row.perturb_axis.value} is empty"
                )
            if not row.angles:
                raise InvalidConfig("row has no object angle lists")
            for oid, angles in row.angles.items():
                if oid not in known:
                    raise InvalidConfig(f"row references unknown object {oid!r}")
                if not angles:
                    raise InvalidConfig(f"empty angle list for {oid!r}")

    def row_for(self, axis: PerturbAxis, grasp: GraspType) -> Optional[TrialMatrixRow]:
        for row in self.rows:
            if row.perturb_axis is axis and row.grasp_type is grasp:
                return row
        return None

    def to_records(self) -> list[tuple[str, dict]]:
        out = [(
            "trial_matrix",
            {"objects": list(self.objects), "samples_per_config": self.samples_per_config},
        )]
        for row in self.rows:
            out.append((
                "matrix_row",
                {
                    "perturb_axis": row.perturb_axis.value,
                    "range_lo": row.range_lo,
                    "range_hi": row.range_hi,
                    "grasp_type": row.grasp_type.value,
                    "angles": {k: list(v) for k, v in row.angles.items()},
                },
            ))
        return out

    @classmethod
    def from_records(cls, entries: list[tuple[str, dict]]) -> "TrialMatrixConfig":
        header = None
        rows = []
        try:
            for kind, fields in entries:
                if kind == "trial_matrix":
                    header = fields
                elif kind == "matrix_row":
                    rows.append(TrialMatrixRow(
                        perturb_axis=PerturbAxis(fields["perturb_axis"]),
                        range_lo=float(fields["range_lo"]),
                        range_hi=float(fields["range_hi"]),
                        grasp_type=GraspType(fields["grasp_type"]),
                        angles={k: tuple(float(a) for a in v)
                                for k, v in fields["angles"].items()},
                    ))
            if header is None:
                raise InvalidConfig("no trial_matrix record found")
            cfg = cls(
                rows=tuple(rows),
                objects=tuple(header["objects"]),
                samples_per_config=int(header["samples_per_config"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, InvalidConfig):
                raise
            raise InvalidConfig(f"malformed matrix record: {e!r}") from e
        cfg.validate()
        return cfg


def load_matrix_config(path) -> TrialMatrixConfig:
    try:
        return TrialMatrixConfig.from_records(records.read_records(path))
    except records.RecordError as e:
        raise InvalidConfig(str(e)) from e


def save_matrix_config(path, cfg: TrialMatrixConfig) -> None:
    records.write_records(path, cfg.to_records())


def generate_table_trials(cfg: TrialMatrixConfig) -> list[TrialSpec]:
    """Expand the matrix: rows x objects x angles x equally spaced samples."""
    cfg.validate()
    n = cfg.samples_per_config
    specs: list[TrialSpec] = []
    tid = 1
    for row in cfg.rows:
        for oid in cfg.objects:
            for angle in row.angles.get(oid, ()):
                for k in range(n):
                    if n == 1:
                        value = row.range_lo
                    else:
                        value = row.range_lo + k * (row.range_hi - row.range_lo) / (n - 1)
                    specs.append(TrialSpec(
                        trial_id=tid,
                        object_id=oid,
                        object_angle=angle,
                        grasp_type=row.grasp_type,
                        perturb_axis=row.perturb_axis,
                        perturb_value=value,
                        collect_data=True,
                    ))
                    tid += 1
    return specs


# ---------------------------------------------------------------------------
# trial CSV

class TrialCsvError(ValueError):
    def __init__(self, msg: str, line: int | None = None, column: str | None = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column!r})" if column else ")")
        super().__init__(msg + where)
        self.line = line
        self.column = column


class ParseError(TrialCsvError):
    pass


class UnknownObject(TrialCsvError):
    pass


class AngleOutOfRange(TrialCsvError):
    pass


class DuplicateTrialIdCsv(TrialCsvError):
    pass


def _parse_bool(raw: str, line: int, column: str) -> bool:
    v = raw.strip().lower()
    if v == "true":
        return True
    if v == "false":
        return False
    raise ParseError(f"expected true/false, got {raw!r}", line, column)


def load_trial_csv(path_or_file, known_objects=None) -> list[TrialSpec]:
    """Parse a trial CSV (header required) into specs, in file order."""
    if hasattr(path_or_file, "read"):
        return _load_trial_csv(path_or_file, known_objects)
    with open(path_or_file, "r", encoding="utf-8", newline="") as f:
        return _load_trial_csv(f, known_objects)


def _load_trial_csv(f, known_objects) -> list[TrialSpec]:
    reader = csv.reader(f)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file: header row required", 1) from None
    header = [h.strip() for h in header]
    if header != CSV_COLUMNS:
        raise ParseError(f"bad header {header!r}, expected {CSV_COLUMNS!r}", 1)
    specs: list[TrialSpec] = []
    seen_ids: set[int] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", lineno)
        raw = dict(zip(CSV_COLUMNS, (c.strip() for c in row)))
        try:
            tid = int(raw["trial_id"])
        except ValueError:
            raise ParseError(f"bad trial_id {raw['trial_id']!r}", lineno, "trial_id") from None
        if tid in seen_ids:
            raise DuplicateTrialIdCsv(f"duplicate trial_id {tid}", lineno, "trial_id")
        if known_objects is not None and raw["object"] not in known_objects:
            raise UnknownObject(f"unknown object {raw['object']!r}", lineno, "object")
        try:
            angle = float(raw["object_angle_deg"])
        except ValueError:
            raise ParseError(
                f"bad angle {raw['object_angle_deg']!r}", lineno, "object_angle_deg"
            ) from None
        if not (0.0 <= angle < 360.0):
            raise AngleOutOfRange(f"angle {angle} outside [0, 360)", lineno, "object_angle_deg")
        try:
            grasp = GraspType(raw["grasp_type"].lower())
        except ValueError:
            raise ParseError(f"bad grasp_type {raw['grasp_type']!r}", lineno, "grasp_type") from None
        try:
            axis = PerturbAxis(raw["perturb_axis"].lower())
        except ValueError:
            raise ParseError(
                f"bad perturb_axis {raw['perturb_axis']!r}", lineno, "perturb_axis"
            ) from None
        try:
            value = float(raw["perturb_value"])
        except ValueError:
            raise ParseError(
                f"bad perturb_value {raw['perturb_value']!r}", lineno, "perturb_value"
            ) from None
        collect = _parse_bool(raw["collect_data"], lineno, "collect_data")
        seen_ids.add(tid)
        specs.append(TrialSpec(
            trial_id=tid,
            object_id=raw["object"],
            object_angle=angle,
            grasp_type=grasp,
            perturb_axis=axis,
            perturb_value=value,
            collect_data=collect,
        ))
    return specs


def export_trials_csv(specs: list[TrialSpec], path_or_file) -> None:
    """Write specs so that a generate -> export -> load round trip is exact."""
    if hasattr(path_or_file, "write"):
        _export_trials_csv(specs, path_or_file)
    else:
        with open(path_or_file, "w", encoding="utf-8", newline="") as f:
            _export_trials_csv(specs, f)


def _export_trials_csv(specs, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in specs:
        w.writerow([
            s.trial_id,
            s.object_id,
            repr(s.object_angle),
            s.grasp_type.value,
            s.perturb_axis.value,
            repr(s.perturb_value),
            "true" if s.collect_data else "false",
        ])


def trials_csv_text(specs: list[TrialSpec]) -> str:
    buf = io.StringIO()
    _export_trials_csv(specs, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# runner

class BatchPolicy(str, Enum):
    ABORT_ON_FAULT = "abort"
    SKIP_ON_FAULT = "skip"


@dataclass
class BatchSummary:
    completed: int = 0
    aborted: int = 0
    success_count: int = 0
    elapsed_ms: float = 0.0


@dataclass
class TrialRunner:
    """Drives one device and one arm through the action protocol."""

    device: ActionClient
    arm: ActionClient
    objects: dict[str, ObjectSpec]
    gripper: GripperModel = field(default_factory=GripperModel)
    writer: Optional[SessionWriter] = None
    camera_hz: float = 5.0
    on_phase: Optional[Callable[[int, TrialPhase], None]] = None

    def _phase(self, spec: TrialSpec, phase: TrialPhase) -> None:
        if self.on_phase is not None:
            self.on_phase(spec.trial_id, phase)

    def _device_goal(self, op: OpCode, params: dict | None = None):
        try:
            outcome = self.device.execute(op, params)
        except (ProtocolError, ActionTimeout) as e:
            raise DeviceFault(f"{op.name}: {e}") from e
        if not outcome.ok:
            raise DeviceFault(f"{op.name}: {outcome.detail}")
        return outcome

    def home_device(self) -> None:
        self._device_goal(OpCode.HOME)

    def run_trial(self, spec: TrialSpec, seed: int, session_ref: str = "") -> TrialRecord:
        obj = self.objects.get(spec.object_id)
        clock_start = None
        try:
            state = self._device_goal(OpCode.READ_STATE).state
            clock_start = state.clock
            if obj is None:
                raise DeviceFault(f"object {spec.object_id!r} not in library")

            self._phase(spec, TrialPhase.SWAP_IF_NEEDED)
            if state.object_on_platform != spec.object_id:
                try:
                    slot = state.storage_slots.index(spec.object_id)
                except ValueError:
                    raise DeviceFault(
                        f"object {spec.object_id!r} neither on platform nor in storage"
                    ) from None
                self._device_goal(OpCode.SWAP, {"slot": slot})

            self._phase(spec, TrialPhase.RESET)
            self._device_goal(
                OpCode.LOWER_RESET,
                {"target_deg": spec.object_angle, "seed": seed & 0xFFFFFFFF},
            )
            state = self._device_goal(OpCode.READ_STATE).state
            reset_pose = state.object_pose
            reset_clock = state.clock

            self._phase(spec, TrialPhase.PLAN_GRASP)
            try:
                plan = plan_grasp(spec, obj, reset_pose, self.gripper)
            except UnsupportedCombination as e:
                raise ArmFault(str(e)) from e

            self._phase(spec, TrialPhase.EXECUTE_GRASP)
            try:
                arm_outcome = self.arm.execute(OpCode.EXECUTE_GRASP, {
                    "object_id": spec.object_id,
                    "object_pose": reset_pose,
                    "grasp_type": spec.grasp_type,
                    "plan_pose": plan.pose,
                    "closing_axis": plan.closing_axis,
                    "approach_tilt": plan.approach_tilt,
                    "clock_ms": reset_clock,
                })
            except (ProtocolError, ActionTimeout) as e:
                raise ArmFault(f"EXECUTE_GRASP: {e}") from e
            if not arm_outcome.ok:
                raise ArmFault(f"EXECUTE_GRASP: {arm_outcome.detail}")
            trajectory = arm_outcome.params["trajectory"]
            grasp_pose: Pose6D = arm_outcome.params["grasp_pose"]
            final_pose: Pose2D = arm_outcome.params["final_object_pose"]
            arm_elapsed = (trajectory[-1][0] - reset_clock) if trajectory else 0.0

            # reflect the arm's effect on the world and let that time pass on the rig
            self._device_goal(OpCode.SET_OBJECT_POSE, {"pose": final_pose, "elapsed_ms": arm_elapsed})

            self._phase(spec, TrialPhase.EVALUATE)
            # the arm is untrusted: recompute success from the trajectory
            success = grasp_succeeded(trajectory, self.gripper.min_read_closed)

            end_clock = self._device_goal(OpCode.READ_STATE).state.clock
            record = TrialRecord(
                spec=spec,
                reset_pose=reset_pose,
                grasp_pose=grasp_pose,
                gripper_trajectory=trajectory,
                success=success,
                transport_target_offset=250.0,
                session_ref=session_ref,
                wall_ticks=end_clock - clock_start,
            )

            self._phase(spec, TrialPhase.RECORD)
            if self.writer is not None:
                try:
                    if spec.collect_data:  # channel capture is optional, the outcome row is not
                        self._record_channels(record, reset_clock)
                    self.writer.write_trial_record(record)
                except DatalogError as e:
                    raise LogFault(str(e)) from e
            self._phase(spec, TrialPhase.DONE)
            return record
        except TrialFault as fault:
            self._phase(spec, TrialPhase.ABORTED)
            record = TrialRecord(
                spec=spec,
                reset_pose=Pose2D(0.0, 0.0, 0.0),
                grasp_pose=Pose6D(0, 0, 0, 0, 0, 0),
                gripper_trajectory=(),
                success=False,
                transport_target_offset=250.0,
                session_ref=session_ref,
                wall_ticks=0.0,
                aborted=True,
                fault=f"{type(fault).__name__}: {fault.detail}",
            )
            if self.writer is not None and not isinstance(fault, LogFault):
                try:
                    self.writer.write_trial_record(record)
                except DatalogError:
                    pass
            fault.record = record
            raise

    def _record_channels(self, record: TrialRecord, reset_clock: float) -> None:
        w = self.writer
        spec = record.spec
        w.record_channel("object_pose", reset_clock, {
            "trial_id": spec.trial_id,
            "x_mm": record.reset_pose.x,
            "y_mm": record.reset_pose.y,
            "theta_deg": record.reset_pose.theta,
        })
        pose = list(record.grasp_pose.as_tuple())
        for t, opening in record.gripper_trajectory:
            w.record_channel("gripper_state", t, {"opening_mm": opening})
            w.record_channel("arm_state", t, {"pose": pose})
        if record.gripper_trajectory:
            t0 = record.gripper_trajectory[0][0]
            t1 = record.gripper_trajectory[-1][0]
            frame_dt = 1000.0 / self.camera_hz
            t = t0
            idx = 0
            while t <= t1:
                meta = {"frame": idx, "w": 640, "h": 480}
                w.record_channel("top_cam", t, meta)
                w.record_channel("side_cam", t, meta)
                w.record_channel("wrist_rgbd", t, dict(meta, depth=True))
                idx += 1
                t += frame_dt

    def run_batch(
        self,
        specs: list[TrialSpec],
        batch_seed: int = 0,
        policy: BatchPolicy = BatchPolicy.SKIP_ON_FAULT,
        session_ref: str = "",
    ) -> BatchSummary:
        """Home once, then run every trial; faults count per the chosen policy."""
        if not specs:
            raise ValueError("run_batch needs at least one trial spec")
        summary = BatchSummary()
        start_clock = self._device_goal(OpCode.READ_STATE).state.clock
        self.home_device()
        for spec in specs:
            seed = (batch_seed ^ spec.trial_id) & 0xFFFFFFFF
            try:
                record = self.run_trial(spec, seed, session_ref)
            except TrialFault:
                summary.aborted += 1
                if policy is BatchPolicy.ABORT_ON_FAULT:
                    break
                continue
            summary.completed += 1
            if record.success:
                summary.success_count += 1
        end_clock = self._device_goal(OpCode.READ_STATE).state.clock
        summary.elapsed_ms = end_clock - start_clock
        return summary

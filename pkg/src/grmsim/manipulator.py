"""Scripted parallel-jaw manipulator: grasp planning, a geometric closure
oracle, and lift-and-transport execution.

The closure model is quasi-static and planar. The jaw pads sweep a rectangle
in the table plane (pad_length across the closing axis, max_opening along
it); the closure width is the extent of the footprint/sweep intersection
along the closing axis. A grasp holds through the 250 mm transport when the
jaws close on something (width never reads fully closed), the closing axis
lines up with the grasped face pair within the friction cone, and the
approach is not tilted beyond the friction cone against gravity shear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import (
    ang_dist_mod180,
    clip_polygon_box,
    edge_normal_axes_deg,
    extent_along_x,
    transform_polygon,
)
from .protocol import ActionServer, OpCode
from .types import GraspType, ObjectSpec, PerturbAxis, Pose2D, Pose6D, TrialSpec

TRANSPORT_DISTANCE_MM = 250.0


class UnsupportedCombination(Exception):
    """Perturbation axis / grasp type pair outside the shipped trial matrix."""

    detail = "UnsupportedCombination"


# axis/grasp pairs present in the shipped trial matrix
SUPPORTED_COMBINATIONS = {
    (GraspType.TOP, PerturbAxis.X_TRANS),
    (GraspType.TOP, PerturbAxis.Y_TRANS),
    (GraspType.TOP, PerturbAxis.X_ROT),
    (GraspType.TOP, PerturbAxis.Y_ROT),
    (GraspType.TOP, PerturbAxis.Z_ROT),
    (GraspType.SIDE, PerturbAxis.X_TRANS),
    (GraspType.SIDE, PerturbAxis.X_ROT),
    (GraspType.SIDE, PerturbAxis.Z_ROT),
}


@dataclass(frozen=True)
class GripperModel:
    """Two-finger gripper parameters (2F-85 class: 85 mm stroke)."""

    max_opening: float = 85.0
    pad_length: float = 40.0
    pad_height: float = 20.0
    min_read_closed: float = 3.0  # opening at/below this reads "fully closed"
    friction_mu: float = 0.65

    def __post_init__(self):
        for name in ("max_opening", "pad_length", "pad_height", "min_read_closed", "friction_mu"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.min_read_closed >= self.max_opening:
            raise ValueError("min_read_closed must be below max_opening")

    @property
    def slip_limit_deg(self) -> float:
        return math.degrees(math.atan(self.friction_mu))


@dataclass(frozen=True)
class GraspPlan:
    """Gripper pose at closure plus the in-plane closing axis."""

    pose: Pose6D
    closing_axis: tuple[float, float]
    grasp_type: GraspType
    approach_tilt: float  # degrees off the nominal approach, against gravity

    def __post_init__(self):
        ax, ay = self.closing_axis
        norm = math.hypot(ax, ay)
        if not math.isclose(norm, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("closing_axis must be a unit vector")


def _axis_angle_deg(axis: tuple[float, float]) -> float:
    return math.degrees(math.atan2(axis[1], axis[0]))


def _nominal_axis_deg(grasp_type: GraspType) -> float:
    # top grasps close along x (the 0-degree face normal); side grasps
    # approach along +x and close along y
    return 0.0 if grasp_type is GraspType.TOP else 90.0


def plan_grasp(
    spec: TrialSpec, obj: ObjectSpec, obj_pose: Pose2D, g: GripperModel
) -> GraspPlan:
    """Nominal centered grasp with exactly one perturbation applied."""
    combo = (spec.grasp_type, spec.perturb_axis)
    if combo not in SUPPORTED_COMBINATIONS:
        raise UnsupportedCombination(
            f"{spec.perturb_axis.value} not tested for {spec.grasp_type.value} grasps"
        )
    x, y = obj_pose.x, obj_pose.y
    z = obj.height / 2.0  # grasp height defaults to mid-height
    roll = pitch = 0.0
    axis_deg = _nominal_axis_deg(spec.grasp_type)
    tilt = 0.0
    v = spec.perturb_value
    axis = spec.perturb_axis
    if axis is PerturbAxis.X_TRANS:
        x += v
    elif axis is PerturbAxis.Y_TRANS:
        y += v
    elif axis is PerturbAxis.Z_TRANS:
        z += v
    elif axis is PerturbAxis.X_ROT:
        roll = v
        if spec.grasp_type is GraspType.TOP:
            tilt = abs(v)  # tips the vertical approach sideways
        # for side grasps x is the approach axis: a pure wrist roll
    elif axis is PerturbAxis.Y_ROT:
        pitch = v
        tilt = abs(v)
    elif axis is PerturbAxis.Z_ROT:
        axis_deg += v
    a = math.radians(axis_deg)
    pose = Pose6D(x, y, z, roll=roll, pitch=pitch, yaw=axis_deg)
    return GraspPlan(
        pose=pose,
        closing_axis=(math.cos(a), math.sin(a)),
        grasp_type=spec.grasp_type,
        approach_tilt=tilt,
    )


def closure_width(plan: GraspPlan, obj: ObjectSpec, obj_pose: Pose2D, g: GripperModel) -> float:
    """Extent of the footprint inside the pad sweep, measured along the closing axis."""
    world = transform_polygon(obj.footprint, obj_pose.theta, obj_pose.x, obj_pose.y)
    # into the grasp frame: closing axis becomes +x
    a = -math.radians(_axis_angle_deg(plan.closing_axis))
    c, s = math.cos(a), math.sin(a)
    local = [
        (c * (px - plan.pose.x) - s * (py - plan.pose.y),
         s * (px - plan.pose.x) + c * (py - plan.pose.y))
        for px, py in world
    ]
    clipped = clip_polygon_box(
        local,
        -g.max_opening / 2.0, g.max_opening / 2.0,
        -g.pad_length / 2.0, g.pad_length / 2.0,
    )
    return extent_along_x(clipped)


def grasped_pair_misalignment(
    plan: GraspPlan, obj: ObjectSpec, obj_pose: Pose2D
) -> float:
    """Angle between the closing axis and the face pair the grasp was planned on.

    The pair is the footprint edge direction nearest the *nominal* closing
    axis, so in-plane spin moves the axis away from the same pair rather than
    hopping to whichever face happens to be closest.
    """
    world = transform_polygon(obj.footprint, obj_pose.theta, 0.0, 0.0)
    normals = edge_normal_axes_deg(world)
    nominal = _nominal_axis_deg(plan.grasp_type)
    pair = min(normals, key=lambda n: ang_dist_mod180(nominal, n))
    return ang_dist_mod180(_axis_angle_deg(plan.closing_axis), pair)


@dataclass(frozen=True)
class GraspOutcome:
    """Execution result: sampled gripper opening, verdict, and the object's final pose."""

    trajectory: tuple[tuple[float, float], ...]
    success: bool
    grasp_pose: Pose6D
    final_object_pose: Pose2D
    transport_offset: float
    elapsed_ms: float


def execute_grasp_and_transport(
    plan: GraspPlan,
    obj: ObjectSpec,
    obj_pose: Pose2D,
    g: GripperModel,
    clock_ms: float = 0.0,
    sample_hz: float = 10.0,
    close_rate_mm_s: float = 50.0,
    lift_ms: float = 500.0,
    transport_rate_mm_s: float = 100.0,
) -> GraspOutcome:
    """Close, lift, and carry 250 mm; failures show up in the opening trace."""
    w = closure_width(plan, obj, obj_pose, g)
    width_ok = w >= g.min_read_closed
    slip = grasped_pair_misalignment(plan, obj, obj_pose)
    slip_ok = slip <= g.slip_limit_deg
    tilt_ok = plan.approach_tilt <= g.slip_limit_deg
    success = width_ok and slip_ok and tilt_ok

    dt = 1000.0 / sample_hz
    final_w = max(w, 0.0)
    close_ms = (g.max_opening - final_w) / close_rate_mm_s * 1000.0
    transport_ms = TRANSPORT_DISTANCE_MM / transport_rate_mm_s * 1000.0

    samples: list[tuple[float, float]] = []

    def emit(t: float, opening: float) -> None:
        samples.append((clock_ms + t, opening))

    t = 0.0
    emit(0.0, g.max_opening)
    while t < close_ms:
        t = min(t + dt, close_ms)
        frac = t / close_ms if close_ms > 0 else 1.0
        emit(t, g.max_opening - (g.max_opening - final_w) * frac)
    lift_end = close_ms + lift_ms
    while t < lift_end:
        t = min(t + dt, lift_end)
        emit(t, final_w)
    transport_end = lift_end + transport_ms
    if width_ok and not (slip_ok and tilt_ok):
        # the object slips out part way through the carry; the jaws run closed
        slip_at = lift_end + transport_ms / 2.0
        while t < slip_at:
            t = min(t + dt, slip_at)
            emit(t, final_w)
        collapse_end = min(slip_at + 200.0, transport_end)
        while t < collapse_end:
            t = min(t + dt, collapse_end)
            frac = (t - slip_at) / (collapse_end - slip_at)
            emit(t, final_w * (1.0 - frac))
        while t < transport_end:
            t = min(t + dt, transport_end)
            emit(t, 0.0)
    else:
        while t < transport_end:
            t = min(t + dt, transport_end)
            emit(t, final_w)

    if success:
        final_pose = Pose2D(TRANSPORT_DISTANCE_MM, 0.0, obj_pose.theta)
    else:
        final_pose = obj_pose
    return GraspOutcome(
        trajectory=tuple(samples),
        success=success,
        grasp_pose=plan.pose,
        final_object_pose=final_pose,
        transport_offset=TRANSPORT_DISTANCE_MM,
        elapsed_ms=transport_end,
    )


def decimate_preserving_min(traj, max_len: int):
    """Thin a trajectory to max_len samples, keeping first, last, and the minimum."""
    if len(traj) <= max_len:
        return tuple(traj)
    min_i = min(range(len(traj)), key=lambda i: traj[i][1])
    pinned = {0, len(traj) - 1, min_i}
    step = (len(traj) - 1) / (max_len - 1)
    keep = {round(k * step) for k in range(max_len)} | pinned
    while len(keep) > max_len:
        keep.discard(max(keep - pinned))
    return tuple(traj[i] for i in sorted(keep))


class ArmServer(ActionServer):
    """Action server for the manipulator: the reference arm implementation.

    Any external arm can stand in by speaking the same goal/feedback/result
    contract on the EXECUTE_GRASP op.
    """

    MAX_WIRE_SAMPLES = 56  # keeps the result frame under the payload cap

    def __init__(self, objects: dict[str, ObjectSpec], gripper: GripperModel | None = None):
        super().__init__()
        self.objects = dict(objects)
        self.gripper = gripper or GripperModel()

    def _on_goal(self, msg) -> None:
        if msg.op_code != OpCode.EXECUTE_GRASP:
            self._send_result(msg.action_id, msg.op_code, False, "UnknownOp")
            return
        p = msg.params
        obj = self.objects.get(p["object_id"])
        if obj is None:
            self._send_result(msg.action_id, msg.op_code, False, "ObjectUnavailable")
            return
        try:
            plan = GraspPlan(
                pose=p["plan_pose"],
                closing_axis=p["closing_axis"],
                grasp_type=p["grasp_type"],
                approach_tilt=p["approach_tilt"],
            )
            outcome = execute_grasp_and_transport(
                plan, obj, p["object_pose"], self.gripper, clock_ms=p["clock_ms"]
            )
        except (ValueError, KeyError):
            self._send_result(msg.action_id, msg.op_code, False, "Internal")
            return
        self._send_feedback(msg.action_id, msg.op_code, "closure_done")
        self._send_feedback(msg.action_id, msg.op_code, "transport_done")
        self._send_result(
            msg.action_id,
            msg.op_code,
            True,
            success=outcome.success,
            grasp_pose=outcome.grasp_pose,
            final_object_pose=outcome.final_object_pose,
            trajectory=decimate_preserving_min(outcome.trajectory, self.MAX_WIRE_SAMPLES),
        )

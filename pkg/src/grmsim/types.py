"""Domain model shared by the rig simulator, protocol, orchestrator, and reports.

Units are millimeters, grams, degrees, and milliseconds throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .geometry import is_convex, polygon_area_centroid, wrap_180, wrap_360

# Lower-reset compatibility envelope: strictly under 200 mm per dimension,
# at most 1 kg. The swap arm tightens this to 75 mm width/depth and 500 g.
LOWER_MAX_DIM_MM = 200.0
LOWER_MAX_MASS_G = 1000.0
SWAP_MAX_WIDTH_MM = 75.0
SWAP_MAX_DEPTH_MM = 75.0
SWAP_MAX_MASS_G = 500.0

CENTROID_TOL_MM = 1e-6


class Shape(str, Enum):
    RECT_PRISM = "rect_prism"
    TRI_PRISM = "tri_prism"
    CYLINDER = "cylinder"
    CONE = "cone"


class GraspType(str, Enum):
    TOP = "top"
    SIDE = "side"


class PerturbAxis(str, Enum):
    X_TRANS = "x_trans"
    Y_TRANS = "y_trans"
    Z_TRANS = "z_trans"
    X_ROT = "x_rot"
    Y_ROT = "y_rot"
    Z_ROT = "z_rot"

    @property
    def is_rotation(self) -> bool:
        return self.value.endswith("_rot")


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class Pose2D:
    """Planar object pose on the table: x/y in mm, heading in degrees [0, 360)."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        _require_finite("Pose2D", self.x, self.y, self.theta)
        object.__setattr__(self, "theta", wrap_360(self.theta))


@dataclass(frozen=True)
class Pose6D:
    """End-effector pose: translation in mm, roll/pitch/yaw in degrees (-180, 180]."""

    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float

    def __post_init__(self):
        _require_finite("Pose6D", self.x, self.y, self.z, self.roll, self.pitch, self.yaw)
        object.__setattr__(self, "roll", wrap_180(self.roll))
        object.__setattr__(self, "pitch", wrap_180(self.pitch))
        object.__setattr__(self, "yaw", wrap_180(self.yaw))

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.x, self.y, self.z, self.roll, self.pitch, self.yaw)


@dataclass(frozen=True)
class ObjectSpec:
    """One test object: bounding dimensions, mass, footprint, and magnet fittings.

    The footprint is a convex polygon (mm, area centroid at the origin) used by
    the grasp closure oracle; round shapes ship as regular 32-gons.
    """

    id: str
    shape: Shape
    width: float
    depth: float
    height: float
    mass: float
    footprint: tuple[tuple[float, float], ...]
    has_base_insert_receptacle: bool = True
    has_swap_magnet: bool = True
    orientation_magnet_offset: float = 12.0

    def __post_init__(self):
        if not self.id:
            raise ValueError("object id must be nonempty")
        for name in ("width", "depth", "height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.mass <= 0:
            raise ValueError("mass must be > 0")
        fp = tuple((float(x), float(y)) for x, y in self.footprint)
        if len(fp) < 3:
            raise ValueError("footprint needs at least 3 vertices")
        object.__setattr__(self, "footprint", fp)
        if not is_convex(fp):
            raise ValueError(f"footprint of {self.id!r} is not convex")
        _, cx, cy = polygon_area_centroid(fp)
        if math.hypot(cx, cy) > CENTROID_TOL_MM:
            raise ValueError(
                f"footprint centroid of {self.id!r} is ({cx:.3g}, {cy:.3g}) mm, not at the origin"
            )


def validate_lower_compat(obj: ObjectSpec) -> list[str]:
    """Violations against the lower-reset envelope; empty list means compatible."""
    out = []
    for name, v in (("width", obj.width), ("depth", obj.depth), ("height", obj.height)):
        if not v < LOWER_MAX_DIM_MM:
            out.append(f"{name} {v:g} mm not under {LOWER_MAX_DIM_MM:g} mm")
    if obj.mass > LOWER_MAX_MASS_G:
        out.append(f"mass {obj.mass:g} g over {LOWER_MAX_MASS_G:g} g")
    if not obj.has_base_insert_receptacle:
        out.append("missing base insert receptacle")
    return out


def validate_swap_compat(obj: ObjectSpec) -> list[str]:
    """Violations against the (tighter) object-swap envelope; empty list means swappable."""
    out = validate_lower_compat(obj)
    if obj.width > SWAP_MAX_WIDTH_MM:
        out.append(f"width {obj.width:g} mm over swap limit {SWAP_MAX_WIDTH_MM:g} mm")
    if obj.depth > SWAP_MAX_DEPTH_MM:
        out.append(f"depth {obj.depth:g} mm over swap limit {SWAP_MAX_DEPTH_MM:g} mm")
    if obj.mass > SWAP_MAX_MASS_G:
        out.append(f"mass {obj.mass:g} g over swap limit {SWAP_MAX_MASS_G:g} g")
    if not obj.has_swap_magnet:
        out.append("missing top swap magnet")
    return out


@dataclass(frozen=True)
class TrialSpec:
    """One grasp trial: which object, at what platform angle, with one pose perturbation."""

    trial_id: int
    object_id: str
    object_angle: float
    grasp_type: GraspType
    perturb_axis: PerturbAxis
    perturb_value: float
    collect_data: bool = True

    def __post_init__(self):
        if self.trial_id < 1:
            raise ValueError("trial_id must be a positive integer")
        if not (0.0 <= self.object_angle < 360.0):
            raise ValueError(f"object_angle {self.object_angle!r} outside [0, 360)")
        _require_finite("perturb_value", self.perturb_value)

    def to_fields(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "object": self.object_id,
            "object_angle_deg": self.object_angle,
            "grasp_type": self.grasp_type.value,
            "perturb_axis": self.perturb_axis.value,
            "perturb_value": self.perturb_value,
            "collect_data": self.collect_data,
        }

    @classmethod
    def from_fields(cls, f: dict) -> "TrialSpec":
        return cls(
            trial_id=int(f["trial_id"]),
            object_id=str(f["object"]),
            object_angle=float(f["object_angle_deg"]),
            grasp_type=GraspType(f["grasp_type"]),
            perturb_axis=PerturbAxis(f["perturb_axis"]),
            perturb_value=float(f["perturb_value"]),
            collect_data=bool(f["collect_data"]),
        )


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one trial as persisted to the session trial log."""

    spec: TrialSpec
    reset_pose: Pose2D
    grasp_pose: Pose6D
    gripper_trajectory: tuple[tuple[float, float], ...]
    success: bool
    transport_target_offset: float
    session_ref: str
    wall_ticks: float
    aborted: bool = False
    fault: str = ""

    def __post_init__(self):
        traj = tuple((float(t), float(w)) for t, w in self.gripper_trajectory)
        object.__setattr__(self, "gripper_trajectory", traj)
        if not self.aborted and not traj:
            raise ValueError("completed trial must have a nonempty gripper trajectory")
        for (t0, _), (t1, _) in zip(traj, traj[1:]):
            if t1 < t0:
                raise ValueError("gripper trajectory timestamps must be non-decreasing")

    def min_opening(self) -> float:
        return min(w for _, w in self.gripper_trajectory)

    def to_fields(self) -> dict:
        return {
            "spec": self.spec.to_fields(),
            "reset_pose": [self.reset_pose.x, self.reset_pose.y, self.reset_pose.theta],
            "grasp_pose": list(self.grasp_pose.as_tuple()),
            "trajectory": [[t, w] for t, w in self.gripper_trajectory],
            "success": self.success,
            "transport_offset_mm": self.transport_target_offset,
            "session_ref": self.session_ref,
            "wall_ticks_ms": self.wall_ticks,
            "aborted": self.aborted,
            "fault": self.fault,
        }

    @classmethod
    def from_fields(cls, f: dict) -> "TrialRecord":
        rp = f["reset_pose"]
        gp = f["grasp_pose"]
        return cls(
            spec=TrialSpec.from_fields(f["spec"]),
            reset_pose=Pose2D(rp[0], rp[1], rp[2]),
            grasp_pose=Pose6D(*gp),
            gripper_trajectory=tuple((t, w) for t, w in f["trajectory"]),
            success=bool(f["success"]),
            transport_target_offset=float(f["transport_offset_mm"]),
            session_ref=str(f["session_ref"]),
            wall_ticks=float(f["wall_ticks_ms"]),
            aborted=bool(f["aborted"]),
            fault=str(f["fault"]),
        )


def grasp_succeeded(trajectory, min_read_closed: float) -> bool:
    """Success criterion: the gripper opening never reads fully closed."""
    return bool(trajectory) and min(w for _, w in trajectory) >= min_read_closed

"""Simulated reset-rig firmware.

Models the lower reset (lift cone, string winch, rotating platform with hall
homing and an optical encoder) and the upper 3-DOF swap arm as a single
discrete-time state machine. Commands start a sequence program; ``tick``
advances simulated time, firing limit-switch / copper-short / hall events at
the exact instant their geometric condition first holds.

The device is single-owner: one logical thread issues commands and ticks.
Snapshots from ``read_state`` are immutable and safe to share.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Optional

from . import records
from .geometry import wrap_360
from .types import ObjectSpec, Pose2D, validate_swap_compat

_EPS_MS = 1e-9


# ---------------------------------------------------------------------------
# errors

class DeviceError(Exception):
    """Base for firmware-level command failures; ``detail`` is the wire code name."""

    detail = "Internal"


class EstopEngaged(DeviceError):
    detail = "EstopEngaged"


class NotHomed(DeviceError):
    detail = "NotHomed"


class TetherLimit(DeviceError):
    detail = "TetherLimit"


class ConeNotRaised(DeviceError):
    detail = "ConeNotRaised"


class SwapIncompatible(DeviceError):
    detail = "SwapIncompatible"


class SlotEmpty(DeviceError):
    detail = "SlotEmpty"


class NoFreeSlot(DeviceError):
    detail = "NoFreeSlot"


class SequenceTimeout(DeviceError):
    detail = "SequenceTimeout"


class DeviceBusy(DeviceError):
    detail = "Busy"


class CommandCancelled(DeviceError):
    detail = "Cancelled"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DeviceConfig:
    """Motion rates, sensor geometry, noise, and sequencing limits.

    Rates are invented defaults sized so a full reset plus grasp lands near a
    minute of simulated time per trial. The reset noise sigmas are the
    repeatability calibration; the encoder default of 1 degree/tick makes
    every shipped platform angle exactly representable.
    """

    cone_rate_mm_s: float = 10.0
    cone_stroke_mm: float = 30.0
    winch_rate_mm_s: float = 100.0
    platform_rate_deg_s: float = 30.0
    upper_lin_rate_mm_s: float = 50.0
    upper_yaw_rate_deg_s: float = 45.0
    deg_per_tick: float = 1.0
    sigma_xy_mm: float = 0.05
    sigma_theta_deg: float = 2.0
    tether_limit_mm: float = 500.0
    storage_slots: int = 6
    stage_deadline_ms: float = 60000.0
    platform_radius_mm: float = 125.0
    # upper-arm waypoints (mm/deg): park is also the home-switch position
    arm_park_x: float = 0.0
    arm_travel_z: float = 300.0
    arm_pick_z: float = 120.0
    arm_shelf_z: float = 80.0
    arm_platform_x: float = 250.0
    arm_slot0_x: float = 50.0
    arm_slot_pitch_x: float = 60.0

    def to_fields(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_fields(cls, f: dict) -> "DeviceConfig":
        known = {k: v for k, v in f.items() if k in cls.__dataclass_fields__}
        unknown = set(f) - set(known)
        if unknown:
            raise ValueError(f"unknown device config keys: {sorted(unknown)}")
        cfg = cls(**known)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for k in (
            "cone_rate_mm_s", "cone_stroke_mm", "winch_rate_mm_s", "platform_rate_deg_s",
            "upper_lin_rate_mm_s", "upper_yaw_rate_deg_s", "deg_per_tick",
            "tether_limit_mm", "stage_deadline_ms",
        ):
            if getattr(self, k) <= 0:
                raise ValueError(f"device config {k} must be > 0")
        if self.sigma_xy_mm < 0 or self.sigma_theta_deg < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.storage_slots < 1:
            raise ValueError("need at least one storage slot")

    def apply_overrides(self, pairs: list[str]) -> None:
        """Apply ``key=value`` CLI overrides."""
        for pair in pairs:
            key, _, raw = pair.partition("=")
            if key not in self.__dataclass_fields__:
                raise ValueError(f"unknown device option {key!r}")
            current = getattr(self, key)
            setattr(self, key, int(raw) if isinstance(current, int) else float(raw))
        self.validate()


def load_device_config(path) -> DeviceConfig:
    entries = records.read_records(path)
    for kind, fields in entries:
        if kind == "device_config":
            return DeviceConfig.from_fields(fields)
    raise records.RecordError(f"{path}: no device_config record found")


def save_device_config(path, cfg: DeviceConfig) -> None:
    records.write_records(path, [("device_config", cfg.to_fields())])


# ---------------------------------------------------------------------------
# observable state

class ConePhase(str, Enum):
    LOWERED = "lowered"
    RAISING = "raising"
    RAISED = "raised"
    LOWERING = "lowering"


@dataclass(frozen=True)
class LowerState:
    cone: ConePhase
    cone_height: float
    string_out: float
    string_home: bool
    platform_angle: float
    platform_homed: bool
    hall_triggered: bool
    encoder_ticks: int


@dataclass(frozen=True)
class UpperState:
    x: float
    z: float
    yaw: float
    magnet_on: bool
    holding: Optional[str]
    x_homed: bool
    z_homed: bool
    yaw_homed: bool

    @property
    def all_homed(self) -> bool:
        return self.x_homed and self.z_homed and self.yaw_homed


@dataclass(frozen=True)
class DeviceState:
    lower: LowerState
    upper: UpperState
    estop: bool
    object_pose: Pose2D
    object_on_platform: Optional[str]
    storage_slots: tuple[Optional[str], ...]
    clock: float


class CommandStatus(str, Enum):
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class CommandHandle:
    """Progress of one in-flight command sequence."""

    name: str
    status: CommandStatus = CommandStatus.RUNNING
    error: Optional[DeviceError] = None
    stages: list[tuple[float, str]] = field(default_factory=list)
    started_clock: float = 0.0
    finished_clock: float = 0.0


# ---------------------------------------------------------------------------
# motion primitives

class _Motion:
    def remaining_ms(self, dev: "GrmDevice") -> float:
        raise NotImplementedError

    def advance(self, dev: "GrmDevice", dt_ms: float) -> None:
        raise NotImplementedError

    def finish(self, dev: "GrmDevice") -> None:
        pass


class _ConeMove(_Motion):
    def __init__(self, up: bool):
        self.up = up

    def remaining_ms(self, dev):
        target = dev.config.cone_stroke_mm if self.up else 0.0
        return abs(target - dev._cone_h) / dev.config.cone_rate_mm_s * 1000.0

    def advance(self, dev, dt_ms):
        dev._cone_phase = ConePhase.RAISING if self.up else ConePhase.LOWERING
        step = dev.config.cone_rate_mm_s * dt_ms / 1000.0
        dev._cone_h += step if self.up else -step

    def finish(self, dev):
        if self.up:
            dev._cone_h = dev.config.cone_stroke_mm
            dev._cone_phase = ConePhase.RAISED
            dev._emit("limit", "cone_up")
        else:
            dev._cone_h = 0.0
            dev._cone_phase = ConePhase.LOWERED
            dev._emit("limit", "cone_down")


class _StringRetract(_Motion):
    """Drag the tethered object along a straight line to the cone apex."""

    def remaining_ms(self, dev):
        d = math.hypot(dev._obj_x, dev._obj_y)
        return d / dev.config.winch_rate_mm_s * 1000.0

    def advance(self, dev, dt_ms):
        d = math.hypot(dev._obj_x, dev._obj_y)
        step = dev.config.winch_rate_mm_s * dt_ms / 1000.0
        if d <= step or d == 0.0:
            dev._obj_x = dev._obj_y = 0.0
        else:
            k = (d - step) / d
            dev._obj_x *= k
            dev._obj_y *= k

    def finish(self, dev):
        dev._obj_x = dev._obj_y = 0.0
        dev._string_home = True
        dev._emit("short", "copper_short")


class _PlatformTurn(_Motion):
    """Rotate the platform by a signed sweep; the seated object co-rotates."""

    def __init__(self, sweep_deg: float, final_angle: float, homing: bool = False):
        self.sweep = sweep_deg
        self.final_angle = final_angle
        self.homing = homing
        self._moved = 0.0

    def remaining_ms(self, dev):
        return (abs(self.sweep) - abs(self._moved)) / dev.config.platform_rate_deg_s * 1000.0

    def advance(self, dev, dt_ms):
        step = math.copysign(dev.config.platform_rate_deg_s * dt_ms / 1000.0, self.sweep)
        self._moved += step
        dev._platform_angle = wrap_360(dev._platform_angle + step)
        if dev._object_seated():
            dev._obj_theta = wrap_360(dev._obj_theta + step)

    def finish(self, dev):
        dev._platform_angle = self.final_angle
        if self.homing:
            dev._platform_homed = True
            dev._emit("hall", "hall_datum")


class _ArmMove(_Motion):
    AXES = {"x": "_arm_x", "z": "_arm_z", "yaw": "_arm_yaw"}

    def __init__(self, axis: str, target: float):
        self.axis = axis
        self.target = target

    def _rate(self, dev):
        return dev.config.upper_yaw_rate_deg_s if self.axis == "yaw" else dev.config.upper_lin_rate_mm_s

    def remaining_ms(self, dev):
        cur = getattr(dev, self.AXES[self.axis])
        return abs(self.target - cur) / self._rate(dev) * 1000.0

    def advance(self, dev, dt_ms):
        attr = self.AXES[self.axis]
        cur = getattr(dev, attr)
        step = math.copysign(self._rate(dev) * dt_ms / 1000.0, self.target - cur)
        setattr(dev, attr, cur + step)

    def finish(self, dev):
        setattr(dev, self.AXES[self.axis], self.target)
        home = {"x": dev.config.arm_park_x, "z": dev.config.arm_travel_z, "yaw": 0.0}[self.axis]
        if self.target == home:
            setattr(dev, f"_arm_{self.axis}_homed", True)
            dev._emit("limit", f"arm_{self.axis}_home")


@dataclass
class _Step:
    motion: Optional[_Motion] = None
    action: Optional[Callable[["GrmDevice"], None]] = None
    stage: Optional[str] = None


# ---------------------------------------------------------------------------
# the device

class GrmDevice:
    """Ground-truth simulation of the reset rig, advanced by ``tick``."""

    def __init__(
        self,
        config: DeviceConfig | None = None,
        objects: dict[str, ObjectSpec] | None = None,
        platform_object: Optional[str] = None,
        storage: list[Optional[str]] | None = None,
        initial_pose: Pose2D = Pose2D(0.0, 0.0, 0.0),
        seed: int = 0,
    ):
        self.config = config or DeviceConfig()
        self.config.validate()
        self.objects = dict(objects or {})
        slots: list[Optional[str]] = list(storage or [])
        if len(slots) > self.config.storage_slots:
            raise ValueError("more stored objects than storage slots")
        slots += [None] * (self.config.storage_slots - len(slots))
        for oid in [platform_object] + slots:
            if oid is not None and oid not in self.objects:
                raise ValueError(f"unknown object id {oid!r}")
        self._slots = slots
        self._platform_object = platform_object
        self._obj_x, self._obj_y = initial_pose.x, initial_pose.y
        self._obj_theta = initial_pose.theta

        self._clock = 0.0
        self._estop = False
        self._cone_h = 0.0
        self._cone_phase = ConePhase.LOWERED
        self._string_home = False
        self._platform_angle = initial_pose.theta
        self._platform_homed = False
        self._arm_x = self.config.arm_park_x
        self._arm_z = self.config.arm_travel_z
        self._arm_yaw = 0.0
        self._arm_x_homed = False
        self._arm_z_homed = False
        self._arm_yaw_homed = False
        self._magnet_on = False
        self._holding: Optional[str] = None

        self._rng = random.Random(seed)
        self._handle: Optional[CommandHandle] = None
        self._program: Optional[Iterator[_Step]] = None
        self._current: Optional[_Step] = None
        self._stage_elapsed = 0.0
        self.events: list[tuple[float, str, str]] = []

    # -- observation ------------------------------------------------------

    @property
    def clock(self) -> float:
        return self._clock

    @property
    def busy(self) -> bool:
        return self._handle is not None and self._handle.status is CommandStatus.RUNNING

    @property
    def estop(self) -> bool:
        return self._estop

    @property
    def active_handle(self) -> Optional[CommandHandle]:
        return self._handle

    def read_state(self) -> DeviceState:
        """Immutable snapshot; never blocks on motion and works under e-stop."""
        res = self.config.deg_per_tick
        ticks = int(round(self._platform_angle / res)) % int(round(360.0 / res))
        a = self._platform_angle % 360.0
        hall = min(a, 360.0 - a) < res / 2.0
        lower = LowerState(
            cone=self._cone_phase,
            cone_height=self._cone_h,
            string_out=math.hypot(self._obj_x, self._obj_y),
            string_home=self._string_home,
            platform_angle=self._platform_angle,
            platform_homed=self._platform_homed,
            hall_triggered=hall,
            encoder_ticks=ticks,
        )
        upper = UpperState(
            x=self._arm_x,
            z=self._arm_z,
            yaw=self._arm_yaw,
            magnet_on=self._magnet_on,
            holding=self._holding,
            x_homed=self._arm_x_homed,
            z_homed=self._arm_z_homed,
            yaw_homed=self._arm_yaw_homed,
        )
        return DeviceState(
            lower=lower,
            upper=upper,
            estop=self._estop,
            object_pose=Pose2D(self._obj_x, self._obj_y, self._obj_theta),
            object_on_platform=self._platform_object,
            storage_slots=tuple(self._slots),
            clock=self._clock,
        )

    # -- internal helpers --------------------------------------------------

    def _emit(self, kind: str, name: str) -> None:
        self.events.append((self._clock, kind, name))

    def _object_seated(self) -> bool:
        return (
            self._platform_object is not None
            and self._cone_phase is ConePhase.LOWERED
            and self._holding is None
            and math.hypot(self._obj_x, self._obj_y) <= self.config.platform_radius_mm
        )

    def _quantize_angle(self, deg: float) -> float:
        res = self.config.deg_per_tick
        return wrap_360(round(deg / res) * res)  # round-half-to-even on tick boundary

    def _snap_platform_to_tick(self) -> None:
        self._platform_angle = self._quantize_angle(self._platform_angle)

    def _check_not_estopped(self) -> None:
        if self._estop:
            raise EstopEngaged("e-stop engaged: motor power is off")

    def _begin(self, name: str, program: Iterator[_Step]) -> CommandHandle:
        if self.busy:
            raise DeviceBusy(f"command {self._handle.name!r} still running")
        handle = CommandHandle(name=name, started_clock=self._clock)
        self._handle = handle
        self._program = program
        self._current = None
        self._stage_elapsed = 0.0
        self._settle()  # zero-duration steps complete at the start instant
        return handle

    def _finish_program(self, status: CommandStatus, error: DeviceError | None = None) -> None:
        if self._handle is not None and self._handle.status is CommandStatus.RUNNING:
            self._handle.status = status
            self._handle.error = error
            self._handle.finished_clock = self._clock
        self._program = None
        self._current = None

    # -- time --------------------------------------------------------------

    def _complete_step(self, step: _Step) -> None:
        if step.motion is not None:
            step.motion.finish(self)
        elif step.action is not None:
            step.action(self)
        if step.stage:
            self._handle.stages.append((self._clock, step.stage))
            self._emit("stage", step.stage)
        self._current = None

    def _settle(self) -> None:
        """Run every zero-duration step (instant actions, finished motions, program end)."""
        if self._estop or not self.busy:
            return
        while True:
            if self._current is None:
                try:
                    self._current = next(self._program)
                    self._stage_elapsed = 0.0
                except StopIteration:
                    self._finish_program(CommandStatus.DONE)
                    return
                except DeviceError as e:
                    self._finish_program(CommandStatus.FAILED, e)
                    return
            step = self._current
            if step.motion is not None and step.motion.remaining_ms(self) > _EPS_MS:
                return
            self._complete_step(step)

    def tick(self, dt_ms: float) -> None:
        """Advance simulated time. Under e-stop only the clock moves."""
        if dt_ms <= 0:
            raise ValueError("tick dt must be > 0")
        end_clock = self._clock + float(dt_ms)
        if not self._estop:
            self._settle()
            while self.busy and self._clock < end_clock - _EPS_MS:
                step = self._current  # a motion with time remaining, per _settle
                need = step.motion.remaining_ms(self)
                take = min(need, end_clock - self._clock)
                deadline_left = self.config.stage_deadline_ms - self._stage_elapsed
                timed_out = take > deadline_left
                if timed_out:
                    take = max(deadline_left, 0.0)
                if take > 0:
                    step.motion.advance(self, take)
                    self._clock += take
                    self._stage_elapsed += take
                if timed_out:
                    self._snap_platform_to_tick()
                    self._finish_program(
                        CommandStatus.FAILED,
                        SequenceTimeout(f"stage {step.stage or '?'} exceeded deadline"),
                    )
                    break
                if step.motion.remaining_ms(self) <= _EPS_MS:
                    self._complete_step(step)
                    self._settle()
        # idle out whatever part of dt the program did not consume
        if self._clock < end_clock:
            self._clock = end_clock

    def next_event_ms(self) -> Optional[float]:
        """Time until the current motion completes, if a motion is in progress."""
        if self._current is not None and self._current.motion is not None:
            return self._current.motion.remaining_ms(self)
        return 1.0 if self.busy else None

    def run_active(self, max_ms: float = 3_600_000.0) -> float:
        """Tick until the active command finishes; returns elapsed simulated ms."""
        start = self._clock
        while self.busy:
            if self._clock - start > max_ms:
                raise SequenceTimeout(f"command exceeded {max_ms} ms harness budget")
            self.tick(max(self.next_event_ms() or 1.0, 0.001))
        handle = self._handle
        if handle is not None and handle.status is CommandStatus.FAILED:
            raise handle.error
        return self._clock - start

    def abort_active(self, error: DeviceError | None = None) -> None:
        """Abort the in-flight command, freezing positions at the current tick."""
        if self.busy:
            self._snap_platform_to_tick()
            self._finish_program(CommandStatus.FAILED, error or CommandCancelled("cancelled"))

    # -- e-stop --------------------------------------------------------------

    def set_estop(self, engaged: bool) -> None:
        """Engage: freeze motion, fail the active command. Release: force re-homing."""
        if engaged == self._estop:
            return
        if engaged:
            self.abort_active(EstopEngaged("e-stop engaged mid-motion"))
            self._estop = True
        else:
            self._estop = False
            # positions may be stale after an abort; require fresh datums
            self._platform_homed = False
            self._arm_x_homed = self._arm_z_homed = self._arm_yaw_homed = False

    def set_object_pose(self, pose: Pose2D, elapsed_ms: float = 0.0) -> None:
        """Inject the object's true pose after external manipulation (e.g. transport)."""
        if self.busy:
            raise DeviceBusy("cannot move the object while a sequence is running")
        if elapsed_ms > 0:
            self.tick(elapsed_ms)
        self._obj_x, self._obj_y, self._obj_theta = pose.x, pose.y, pose.theta
        if math.hypot(pose.x, pose.y) > 0:
            self._string_home = False

    # -- command programs ----------------------------------------------------

    def start_home_platform(self) -> CommandHandle:
        self._check_not_estopped()

        def prog():
            yield self._home_platform_step()

        return self._begin("home_platform", prog())

    def _home_platform_step(self) -> _Step:
        travel = (360.0 - self._platform_angle % 360.0) % 360.0
        return _Step(motion=_PlatformTurn(travel if travel > 0 else 0.0, 0.0, homing=True),
                     stage="platform_homed")

    def start_rotate_platform(self, target_deg: float) -> CommandHandle:
        self._check_not_estopped()
        if not math.isfinite(target_deg):
            raise ValueError(f"target angle {target_deg!r} is not finite")
        if not self._platform_homed:
            raise NotHomed("platform has no datum; home it first")
        step = self._rotate_step(target_deg)
        def prog():
            yield step
        return self._begin("rotate_platform", prog())

    def _rotate_step(self, target_deg: float) -> _Step:
        target = self._quantize_angle(target_deg)
        delta = target - self._platform_angle
        delta = (delta + 180.0) % 360.0 - 180.0  # shortest signed sweep
        return _Step(motion=_PlatformTurn(delta, target), stage="rotation_done")

    def start_retract_string(self) -> CommandHandle:
        self._check_not_estopped()
        if self._platform_object is None:
            raise SlotEmpty("no object on the tether")
        if self._cone_phase is not ConePhase.RAISED:
            raise ConeNotRaised("centering cone must be raised before retracting")
        self._check_tether()

        def prog():
            yield _Step(motion=_StringRetract(), stage="string_home")

        return self._begin("retract_string", prog())

    def _check_tether(self) -> None:
        d = math.hypot(self._obj_x, self._obj_y)
        if d > self.config.tether_limit_mm:
            raise TetherLimit(
                f"object {d:.1f} mm from center, beyond the {self.config.tether_limit_mm:.0f} mm tether"
            )

    def start_lower_reset(self, target_deg: float, seed: int | None = None) -> CommandHandle:
        """Full reset: raise cone, retract string, set down, home if needed, rotate."""
        self._check_not_estopped()
        if not math.isfinite(target_deg):
            raise ValueError(f"target angle {target_deg!r} is not finite")
        if self._platform_object is None:
            raise SlotEmpty("no object on the tether")

        rng = random.Random(seed) if seed is not None else self._rng

        def prog():
            yield _Step(motion=_ConeMove(up=True), stage="cone_raised")
            self._check_tether()
            yield _Step(motion=_StringRetract(), stage="string_home")
            yield _Step(action=lambda dev: setattr(dev, "_string_home", False))
            yield _Step(motion=_ConeMove(up=False), stage="cone_lowered")
            if not self._platform_homed:
                yield self._home_platform_step()
            yield self._rotate_step(target_deg)
            yield _Step(action=lambda dev: dev._settle_after_reset(target_deg, rng))

        return self._begin("lower_reset", prog())

    def _settle_after_reset(self, target_deg: float, rng: random.Random) -> None:
        cfg = self.config
        target = self._quantize_angle(target_deg)
        ex = rng.gauss(0.0, cfg.sigma_xy_mm) if cfg.sigma_xy_mm > 0 else 0.0
        ey = rng.gauss(0.0, cfg.sigma_xy_mm) if cfg.sigma_xy_mm > 0 else 0.0
        et = rng.gauss(0.0, cfg.sigma_theta_deg) if cfg.sigma_theta_deg > 0 else 0.0
        self._obj_x, self._obj_y = ex, ey
        self._obj_theta = wrap_360(target + et)

    def start_swap_object(self, slot: int) -> CommandHandle:
        self._check_not_estopped()
        if not (self._arm_x_homed and self._arm_z_homed and self._arm_yaw_homed):
            raise NotHomed("upper-reset axes not homed")
        if not (0 <= slot < len(self._slots)):
            raise SlotEmpty(f"no storage slot {slot}")
        incoming = self._slots[slot]
        if incoming is None:
            raise SlotEmpty(f"storage slot {slot} is empty")
        outgoing = self._platform_object
        if outgoing is None:
            raise SwapIncompatible("no object on the platform to swap out")
        for oid in (outgoing, incoming):
            violations = validate_swap_compat(self.objects[oid])
            if violations:
                raise SwapIncompatible(f"{oid}: " + "; ".join(violations))
        try:
            free = self._slots.index(None)
        except ValueError:
            raise NoFreeSlot("all storage slots occupied") from None
        cfg = self.config

        def slot_x(i: int) -> float:
            return cfg.arm_slot0_x + i * cfg.arm_slot_pitch_x

        def prog():
            # fix the object (and insert) on top of the cone so the arm can decouple it
            yield _Step(motion=_ConeMove(up=True), stage="cone_raised")
            self._check_tether()
            yield _Step(motion=_StringRetract(), stage="string_home")
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z), stage="arm_up")
            yield _Step(motion=_ArmMove("yaw", 90.0), stage="arm_out")
            yield _Step(motion=_ArmMove("x", cfg.arm_platform_x), stage="over_object")
            yield _Step(motion=_ArmMove("z", cfg.arm_pick_z))
            yield _Step(action=lambda dev: setattr(dev, "_magnet_on", True))
            yield _Step(action=_pickup_from_platform, stage="object_lifted")
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z))
            yield _Step(motion=_ArmMove("yaw", 0.0))
            yield _Step(motion=_ArmMove("x", slot_x(free)))
            yield _Step(motion=_ArmMove("z", cfg.arm_shelf_z))
            yield _Step(action=lambda dev: _deposit(dev, free), stage="object_stored")
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z))
            yield _Step(motion=_ArmMove("x", slot_x(slot)))
            yield _Step(motion=_ArmMove("z", cfg.arm_shelf_z))
            yield _Step(action=lambda dev: _pick_slot(dev, slot), stage="object_picked")
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z))
            yield _Step(motion=_ArmMove("yaw", 90.0))
            yield _Step(motion=_ArmMove("x", cfg.arm_platform_x))
            yield _Step(motion=_ArmMove("z", cfg.arm_pick_z))
            yield _Step(action=_place_on_insert, stage="object_placed")
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z))
            yield _Step(motion=_ArmMove("yaw", 0.0))
            yield _Step(motion=_ArmMove("x", cfg.arm_park_x), stage="arm_parked")

        return self._begin("swap_object", prog())

    def start_home_upper(self) -> CommandHandle:
        self._check_not_estopped()
        cfg = self.config

        def prog():
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z))
            yield _Step(motion=_ArmMove("yaw", 0.0))
            yield _Step(motion=_ArmMove("x", cfg.arm_park_x), stage="upper_homed")

        return self._begin("home_upper", prog())

    def start_home_all(self) -> CommandHandle:
        """Startup homing: platform datum plus all three upper-arm switches."""
        self._check_not_estopped()
        cfg = self.config

        def prog():
            if not self._platform_homed:
                yield self._home_platform_step()
            yield _Step(motion=_ArmMove("z", cfg.arm_travel_z))
            yield _Step(motion=_ArmMove("yaw", 0.0))
            yield _Step(motion=_ArmMove("x", cfg.arm_park_x), stage="upper_homed")

        return self._begin("home_all", prog())

    # primitive motions for the register-map control path
    def start_cone_command(self, up: bool) -> CommandHandle:
        self._check_not_estopped()

        def prog():
            yield _Step(motion=_ConeMove(up=up), stage="cone_raised" if up else "cone_lowered")

        return self._begin("cone_command", prog())

    def start_string_command(self, retract: bool) -> CommandHandle:
        if retract:
            return self.start_retract_string()
        self._check_not_estopped()

        def prog():
            yield _Step(action=lambda dev: setattr(dev, "_string_home", False))

        return self._begin("string_release", prog())

    def start_arm_axis(self, axis: str, target: float) -> CommandHandle:
        self._check_not_estopped()
        if axis not in _ArmMove.AXES:
            raise ValueError(f"unknown arm axis {axis!r}")

        def prog():
            yield _Step(motion=_ArmMove(axis, target))

        return self._begin(f"arm_{axis}", prog())

    def set_magnet(self, on: bool) -> None:
        self._check_not_estopped()
        self._magnet_on = bool(on)

    # -- synchronous conveniences ---------------------------------------------

    def home_platform(self) -> float:
        self.start_home_platform()
        return self.run_active()

    def home_all(self) -> float:
        self.start_home_all()
        return self.run_active()

    def rotate_platform(self, target_deg: float) -> float:
        self.start_rotate_platform(target_deg)
        return self.run_active()

    def retract_string(self) -> float:
        self.start_retract_string()
        return self.run_active()

    def lower_reset(self, target_deg: float, seed: int | None = None) -> float:
        self.start_lower_reset(target_deg, seed)
        return self.run_active()

    def swap_object(self, slot: int) -> float:
        self.start_swap_object(slot)
        return self.run_active()


def _pickup_from_platform(dev: GrmDevice) -> None:
    # electromagnet overpowers the base insert; the object leaves the tether
    dev._holding = dev._platform_object
    dev._platform_object = None


def _deposit(dev: GrmDevice, slot: int) -> None:
    dev._slots[slot] = dev._holding
    dev._holding = None
    dev._magnet_on = False


def _pick_slot(dev: GrmDevice, slot: int) -> None:
    dev._magnet_on = True
    dev._holding = dev._slots[slot]
    dev._slots[slot] = None


def _place_on_insert(dev: GrmDevice) -> None:
    dev._platform_object = dev._holding
    dev._holding = None
    dev._magnet_on = False
    dev._obj_x = dev._obj_y = 0.0
    dev._obj_theta = 0.0
    dev._string_home = True

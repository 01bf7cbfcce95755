"""Framed control protocol between the orchestrator and the rig.

Wire format (all multi-byte fields little-endian)::

    frame    := 0xA5 | length:u16 | msg_type:u8 | payload | crc:u16
    length   =  len(payload), at most 1024
    crc      =  CRC-CCITT (poly 0x1021, init 0xFFFF) over msg_type+payload
    msg_type =  0x01 Goal, 0x02 Feedback, 0x03 Result, 0x04 Cancel

    Goal     payload := action_id:u32 | op:u8 | op params
    Feedback payload := action_id:u32 | op:u8 | stage:u8
    Result   payload := action_id:u32 | op:u8 | status:u8 | detail:u8 | extra
    Cancel   payload := action_id:u32

Every goal receives exactly one Result (status 0 success, 1 fail), preceded
by zero or more Feedback frames, one per completed sequence stage. A second
register-level access path mirrors the controller/MCU boundary inside the
rig: byte-addressed command and status registers per MCU.
"""

from __future__ import annotations

import select
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

from .device import (
    CommandHandle,
    CommandStatus,
    ConePhase,
    DeviceError,
    DeviceState,
    EstopEngaged,
    GrmDevice,
    LowerState,
    UpperState,
)
from .types import GraspType, Pose2D, Pose6D

SYNC = 0xA5
MAX_PAYLOAD = 1024
FRAME_OVERHEAD = 6  # sync + length + msg_type + crc


class MsgKind(IntEnum):
    GOAL = 0x01
    FEEDBACK = 0x02
    RESULT = 0x03
    CANCEL = 0x04


class OpCode(IntEnum):
    LOWER_RESET = 0x01
    SWAP = 0x02
    HOME = 0x03
    ROTATE = 0x04
    ESTOP = 0x05
    READ_STATE = 0x06
    SET_OBJECT_POSE = 0x07
    EXECUTE_GRASP = 0x10


STATUS_SUCCESS = 0x00
STATUS_FAIL = 0x01

# result detail codes
_DETAILS = [
    "Ok", "NotHomed", "EstopEngaged", "TetherLimit", "ConeNotRaised",
    "SwapIncompatible", "SlotEmpty", "NoFreeSlot", "SequenceTimeout",
    "Cancelled", "Busy", "UnknownOp", "UnsupportedCombination",
    "ObjectUnavailable", "Internal",
]
DETAIL_CODE = {name: i for i, name in enumerate(_DETAILS)}
DETAIL_NAME = {i: name for i, name in enumerate(_DETAILS)}

_STAGES = [
    "cone_raised", "string_home", "cone_lowered", "platform_homed",
    "rotation_done", "upper_homed", "arm_up", "arm_out", "over_object",
    "object_lifted", "object_stored", "object_picked", "object_placed",
    "arm_parked", "closure_done", "transport_done",
]
STAGE_CODE = {name: i + 1 for i, name in enumerate(_STAGES)}
STAGE_NAME = {i + 1: name for i, name in enumerate(_STAGES)}

# motion ops fail under e-stop; these remain serviceable ("retains power")
PASSIVE_OPS = {OpCode.READ_STATE, OpCode.ESTOP, OpCode.SET_OBJECT_POSE}


class ProtocolError(Exception):
    pass


class PayloadTooLarge(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    """More bytes are needed; ``consumed`` bytes of leading garbage may be dropped."""

    def __init__(self, msg: str, consumed: int = 0):
        super().__init__(msg)
        self.consumed = consumed


class CrcMismatch(ProtocolError):
    def __init__(self, msg: str, consumed: int):
        super().__init__(msg)
        self.consumed = consumed


class UnknownMsgType(ProtocolError):
    def __init__(self, msg: str, consumed: int):
        super().__init__(msg)
        self.consumed = consumed


class MessageFormatError(ProtocolError):
    pass


class TransportClosed(ProtocolError):
    pass


class ActionTimeout(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# CRC and framing

def _build_crc_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
        table.append(crc)
    return table


_CRC_TABLE = _build_crc_table()


def crc16_ccitt(data: bytes, init: int = 0xFFFF) -> int:
    crc = init
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[(crc >> 8) ^ b]
    return crc


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    body = bytes([msg_type]) + payload
    return (
        bytes([SYNC])
        + struct.pack("<H", len(payload))
        + body
        + struct.pack("<H", crc16_ccitt(body))
    )


def decode_frame(buf: bytes | bytearray) -> tuple[int, bytes, int]:
    """Extract the first complete, CRC-valid frame.

    Returns ``(msg_type, payload, consumed)`` where ``consumed`` counts every
    byte up to and including the frame (leading garbage and discarded bad
    frames included). Raises TruncatedFrame when more bytes are needed,
    CrcMismatch when the only complete frame found is corrupt (the stream
    should advance past its sync byte), and UnknownMsgType for a valid frame
    with an unrecognized type.
    """
    i = 0
    n = len(buf)
    first_bad: Optional[int] = None
    while True:
        while i < n and buf[i] != SYNC:
            i += 1
        if i >= n:
            if first_bad is not None:
                raise CrcMismatch("corrupt frame", consumed=first_bad + 1)
            raise TruncatedFrame("no sync byte", consumed=n)
        if i + 4 > n:
            raise TruncatedFrame("incomplete header", consumed=i)
        (length,) = struct.unpack_from("<H", buf, i + 1)
        if length > MAX_PAYLOAD:
            if first_bad is None:
                first_bad = i
            i += 1
            continue
        total = length + FRAME_OVERHEAD
        if i + total > n:
            raise TruncatedFrame("incomplete frame", consumed=i)
        body = bytes(buf[i + 3 : i + 3 + 1 + length])
        (crc,) = struct.unpack_from("<H", buf, i + 4 + length)
        if crc16_ccitt(body) != crc:
            if first_bad is None:
                first_bad = i
            i += 1
            continue
        msg_type = body[0]
        if msg_type not in (MsgKind.GOAL, MsgKind.FEEDBACK, MsgKind.RESULT, MsgKind.CANCEL):
            raise UnknownMsgType(f"msg_type 0x{msg_type:02x}", consumed=i + total)
        return msg_type, body[1:], i + total


class Deframer:
    """Stateful stream decoder: resynchronizes on garbage and bad CRCs."""

    def __init__(self):
        self._buf = bytearray()
        self.crc_errors = 0
        self.unknown_frames = 0
        self.skipped_bytes = 0

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg_type, payload, consumed = decode_frame(self._buf)
            except TruncatedFrame as e:
                if e.consumed:
                    self.skipped_bytes += e.consumed
                    del self._buf[: e.consumed]
                return out
            except CrcMismatch as e:
                self.crc_errors += 1
                self.skipped_bytes += e.consumed
                del self._buf[: e.consumed]
                continue
            except UnknownMsgType as e:
                self.unknown_frames += 1
                del self._buf[: e.consumed]
                continue
            out.append((msg_type, payload))
            del self._buf[:consumed]


# ---------------------------------------------------------------------------
# message codec

@dataclass(frozen=True)
class ActionMessage:
    kind: MsgKind
    action_id: int
    op_code: int = 0
    params: dict = field(default_factory=dict)


def _pack_str16(s: Optional[str]) -> bytes:
    raw = (s or "").encode("ascii")
    if len(raw) > 16:
        raise MessageFormatError(f"identifier {s!r} longer than 16 bytes")
    return raw.ljust(16, b"\x00")


def _unpack_str16(b: bytes) -> Optional[str]:
    if len(b) != 16:
        raise MessageFormatError("short identifier field")
    try:
        s = b.rstrip(b"\x00").decode("ascii")
    except UnicodeDecodeError as e:
        raise MessageFormatError(f"identifier is not ascii: {e}") from e
    return s or None


_STATE_HEAD = struct.Struct("<dBBddBdBBiddddBBBB")


def pack_device_state(st: DeviceState) -> bytes:
    cone_code = list(ConePhase).index(st.lower.cone)
    head = _STATE_HEAD.pack(
        st.clock,
        1 if st.estop else 0,
        cone_code,
        st.lower.cone_height,
        st.lower.string_out,
        1 if st.lower.string_home else 0,
        st.lower.platform_angle,
        1 if st.lower.platform_homed else 0,
        1 if st.lower.hall_triggered else 0,
        st.lower.encoder_ticks,
        st.upper.x,
        st.upper.z,
        st.upper.yaw,
        st.object_pose.x,
        1 if st.upper.magnet_on else 0,
        1 if st.upper.x_homed else 0,
        1 if st.upper.z_homed else 0,
        1 if st.upper.yaw_homed else 0,
    )
    tail = struct.pack("<dd", st.object_pose.y, st.object_pose.theta)
    blob = (
        head
        + tail
        + _pack_str16(st.upper.holding)
        + _pack_str16(st.object_on_platform)
        + bytes([len(st.storage_slots)])
    )
    for slot in st.storage_slots:
        blob += _pack_str16(slot)
    return blob


def unpack_device_state(b: bytes) -> tuple[DeviceState, int]:
    off = _STATE_HEAD.size
    (
        clock, estop, cone_code, cone_h, string_out, string_home, plat_angle,
        plat_homed, hall, ticks, ux, uz, uyaw, ox, magnet, xh, zh, yh,
    ) = _STATE_HEAD.unpack_from(b, 0)
    oy, otheta = struct.unpack_from("<dd", b, off)
    off += 16
    holding = _unpack_str16(b[off : off + 16]); off += 16
    platform_obj = _unpack_str16(b[off : off + 16]); off += 16
    if off >= len(b):
        raise MessageFormatError("state blob missing slot count")
    n_slots = b[off]; off += 1
    slots = []
    for _ in range(n_slots):
        slots.append(_unpack_str16(b[off : off + 16]))
        off += 16
    st = DeviceState(
        lower=LowerState(
            cone=list(ConePhase)[cone_code],
            cone_height=cone_h,
            string_out=string_out,
            string_home=bool(string_home),
            platform_angle=plat_angle,
            platform_homed=bool(plat_homed),
            hall_triggered=bool(hall),
            encoder_ticks=ticks,
        ),
        upper=UpperState(
            x=ux, z=uz, yaw=uyaw, magnet_on=bool(magnet), holding=holding,
            x_homed=bool(xh), z_homed=bool(zh), yaw_homed=bool(yh),
        ),
        estop=bool(estop),
        object_pose=Pose2D(ox, oy, otheta),
        object_on_platform=platform_obj,
        storage_slots=tuple(slots),
        clock=clock,
    )
    return st, off


def _pack_goal_params(op: int, p: dict) -> bytes:
    if op == OpCode.LOWER_RESET:
        return struct.pack("<dI", float(p["target_deg"]), int(p["seed"]) & 0xFFFFFFFF)
    if op == OpCode.ROTATE:
        return struct.pack("<d", float(p["target_deg"]))
    if op == OpCode.SWAP:
        return struct.pack("<B", int(p["slot"]))
    if op == OpCode.ESTOP:
        return struct.pack("<B", 1 if p["engaged"] else 0)
    if op == OpCode.SET_OBJECT_POSE:
        pose = p["pose"]
        return struct.pack("<dddd", pose.x, pose.y, pose.theta, float(p.get("elapsed_ms", 0.0)))
    if op in (OpCode.HOME, OpCode.READ_STATE):
        return b""
    if op == OpCode.EXECUTE_GRASP:
        plan_pose = p["plan_pose"]
        ax, ay = p["closing_axis"]
        obj_pose = p["object_pose"]
        return (
            _pack_str16(p["object_id"])
            + struct.pack("<ddd", obj_pose.x, obj_pose.y, obj_pose.theta)
            + struct.pack("<B", 0 if p["grasp_type"] is GraspType.TOP else 1)
            + struct.pack("<6d", *plan_pose.as_tuple())
            + struct.pack("<dd", ax, ay)
            + struct.pack("<dd", float(p["approach_tilt"]), float(p["clock_ms"]))
        )
    raise MessageFormatError(f"unknown op code 0x{op:02x}")


def _unpack_goal_params(op: int, b: bytes) -> dict:
    try:
        if op == OpCode.LOWER_RESET:
            target, seed = struct.unpack("<dI", b)
            return {"target_deg": target, "seed": seed}
        if op == OpCode.ROTATE:
            return {"target_deg": struct.unpack("<d", b)[0]}
        if op == OpCode.SWAP:
            if len(b) != 1:
                raise MessageFormatError("swap goal carries one slot byte")
            return {"slot": b[0]}
        if op == OpCode.ESTOP:
            return {"engaged": bool(b[0])}
        if op == OpCode.SET_OBJECT_POSE:
            x, y, theta, elapsed = struct.unpack("<dddd", b)
            return {"pose": Pose2D(x, y, theta), "elapsed_ms": elapsed}
        if op in (OpCode.HOME, OpCode.READ_STATE):
            if b:
                raise MessageFormatError("unexpected params")
            return {}
        if op == OpCode.EXECUTE_GRASP:
            oid = _unpack_str16(b[0:16])
            ox, oy, ot = struct.unpack_from("<ddd", b, 16)
            gt = GraspType.TOP if b[40] == 0 else GraspType.SIDE
            pose_vals = struct.unpack_from("<6d", b, 41)
            ax, ay = struct.unpack_from("<dd", b, 89)
            tilt, clock_ms = struct.unpack_from("<dd", b, 105)
            if len(b) != 121:
                raise MessageFormatError("bad EXECUTE_GRASP length")
            return {
                "object_id": oid,
                "object_pose": Pose2D(ox, oy, ot),
                "grasp_type": gt,
                "plan_pose": Pose6D(*pose_vals),
                "closing_axis": (ax, ay),
                "approach_tilt": tilt,
                "clock_ms": clock_ms,
            }
    except (struct.error, IndexError) as e:
        raise MessageFormatError(f"bad goal params for op 0x{op:02x}: {e}") from e
    raise MessageFormatError(f"unknown op code 0x{op:02x}")


def _pack_result_extra(op: int, p: dict) -> bytes:
    if op == OpCode.READ_STATE and "state" in p:
        return pack_device_state(p["state"])
    if op == OpCode.EXECUTE_GRASP and "grasp_pose" in p:
        traj = p["trajectory"]
        blob = struct.pack("<B", 1 if p["success"] else 0)
        blob += struct.pack("<6d", *p["grasp_pose"].as_tuple())
        fp = p["final_object_pose"]
        blob += struct.pack("<ddd", fp.x, fp.y, fp.theta)
        blob += struct.pack("<H", len(traj))
        for t, w in traj:
            blob += struct.pack("<dd", t, w)
        return blob
    return b""


def _unpack_result_extra(op: int, b: bytes) -> dict:
    try:
        return _unpack_result_extra_inner(op, b)
    except (struct.error, IndexError) as e:
        raise MessageFormatError(f"bad result extra for op 0x{op:02x}: {e}") from e


def _unpack_result_extra_inner(op: int, b: bytes) -> dict:
    if not b:
        return {}
    if op == OpCode.READ_STATE:
        state, consumed = unpack_device_state(b)
        if consumed != len(b):
            raise MessageFormatError("trailing bytes after state blob")
        return {"state": state}
    if op == OpCode.EXECUTE_GRASP:
        success = bool(b[0])
        pose_vals = struct.unpack_from("<6d", b, 1)
        fx, fy, ft = struct.unpack_from("<ddd", b, 49)
        (n,) = struct.unpack_from("<H", b, 73)
        traj = []
        off = 75
        for _ in range(n):
            t, w = struct.unpack_from("<dd", b, off)
            traj.append((t, w))
            off += 16
        if off != len(b):
            raise MessageFormatError("bad EXECUTE_GRASP result length")
        return {
            "success": success,
            "grasp_pose": Pose6D(*pose_vals),
            "final_object_pose": Pose2D(fx, fy, ft),
            "trajectory": tuple(traj),
        }
    raise MessageFormatError(f"unexpected result extra for op 0x{op:02x}")


def encode_message(msg: ActionMessage) -> bytes:
    """Serialize a message into one complete frame."""
    aid = struct.pack("<I", msg.action_id & 0xFFFFFFFF)
    if msg.kind is MsgKind.CANCEL:
        payload = aid
    elif msg.kind is MsgKind.GOAL:
        payload = aid + bytes([msg.op_code]) + _pack_goal_params(msg.op_code, msg.params)
    elif msg.kind is MsgKind.FEEDBACK:
        payload = aid + bytes([msg.op_code, STAGE_CODE[msg.params["stage"]]])
    elif msg.kind is MsgKind.RESULT:
        status = STATUS_SUCCESS if msg.params["status"] == "success" else STATUS_FAIL
        detail = DETAIL_CODE[msg.params.get("detail", "Ok")]
        payload = aid + bytes([msg.op_code, status, detail])
        payload += _pack_result_extra(msg.op_code, msg.params)
    else:
        raise MessageFormatError(f"unknown message kind {msg.kind!r}")
    return encode_frame(int(msg.kind), payload)


def decode_message(msg_type: int, payload: bytes) -> ActionMessage:
    try:
        (aid,) = struct.unpack_from("<I", payload, 0)
    except struct.error as e:
        raise MessageFormatError(f"short payload: {e}") from e
    kind = MsgKind(msg_type)
    if kind is MsgKind.CANCEL:
        if len(payload) != 4:
            raise MessageFormatError("cancel payload must be the action id only")
        return ActionMessage(kind, aid)
    if len(payload) < 5:
        raise MessageFormatError("payload too short for op code")
    op = payload[4]
    if kind is MsgKind.GOAL:
        return ActionMessage(kind, aid, op, _unpack_goal_params(op, payload[5:]))
    if kind is MsgKind.FEEDBACK:
        if len(payload) != 6 or payload[5] not in STAGE_NAME:
            raise MessageFormatError("bad feedback payload")
        return ActionMessage(kind, aid, op, {"stage": STAGE_NAME[payload[5]]})
    # result
    if len(payload) < 7:
        raise MessageFormatError("result payload too short")
    status = "success" if payload[5] == STATUS_SUCCESS else "fail"
    detail = DETAIL_NAME.get(payload[6])
    if detail is None:
        raise MessageFormatError(f"unknown detail code {payload[6]}")
    params = {"status": status, "detail": detail}
    params.update(_unpack_result_extra(op, payload[7:]))
    return ActionMessage(kind, aid, op, params)


# ---------------------------------------------------------------------------
# register map (controller <-> MCU boundary)

class RegisterError(ProtocolError):
    pass


class ReadOnlyRegister(RegisterError):
    pass


class UnknownRegister(RegisterError):
    pass


class Mcu(IntEnum):
    NANO = 0  # lower reset
    MEGA = 1  # upper reset


NANO_CONE_CMD = 0x01
NANO_STRING_CMD = 0x02
NANO_STATUS = 0x10       # bit0 cone up, bit1 copper short, bit2 cone down
NANO_HALL = 0x11
NANO_ENCODER = 0x12      # u16 ticks
MEGA_X_TARGET = 0x01     # u16 mm
MEGA_Z_TARGET = 0x02     # u16 mm
MEGA_YAW_TARGET = 0x03   # u16 deg
MEGA_MAGNET = 0x04
MEGA_LIMITS = 0x10       # bit0 x home, bit1 z home, bit2 yaw home


class RegisterMap:
    """Byte-addressed register emulation of the two MCU control boards.

    Status registers are read-only to the master side and reflect simulator
    events within one tick; command writes start the mapped motion. While
    e-stopped, command writes fail but every read still succeeds.
    """

    _WIDTHS = {
        (Mcu.NANO, NANO_CONE_CMD): 1,
        (Mcu.NANO, NANO_STRING_CMD): 1,
        (Mcu.NANO, NANO_STATUS): 1,
        (Mcu.NANO, NANO_HALL): 1,
        (Mcu.NANO, NANO_ENCODER): 2,
        (Mcu.MEGA, MEGA_X_TARGET): 2,
        (Mcu.MEGA, MEGA_Z_TARGET): 2,
        (Mcu.MEGA, MEGA_YAW_TARGET): 2,
        (Mcu.MEGA, MEGA_MAGNET): 1,
        (Mcu.MEGA, MEGA_LIMITS): 1,
    }
    _READ_ONLY = {
        (Mcu.NANO, NANO_STATUS),
        (Mcu.NANO, NANO_HALL),
        (Mcu.NANO, NANO_ENCODER),
        (Mcu.MEGA, MEGA_LIMITS),
    }

    def __init__(self, device: GrmDevice):
        self.device = device

    def read(self, mcu: Mcu, addr: int) -> bytes:
        key = (Mcu(mcu), addr)
        if key not in self._WIDTHS:
            raise UnknownRegister(f"{Mcu(mcu).name} register 0x{addr:02x}")
        st = self.device.read_state()
        dev = self.device
        if key == (Mcu.NANO, NANO_STATUS):
            bits = 0
            if st.lower.cone is ConePhase.RAISED:
                bits |= 0x01
            if st.lower.string_home:
                bits |= 0x02
            if st.lower.cone is ConePhase.LOWERED:
                bits |= 0x04
            return bytes([bits])
        if key == (Mcu.NANO, NANO_HALL):
            return bytes([1 if st.lower.hall_triggered else 0])
        if key == (Mcu.NANO, NANO_ENCODER):
            return struct.pack("<H", st.lower.encoder_ticks & 0xFFFF)
        if key == (Mcu.NANO, NANO_CONE_CMD):
            return bytes([dev._last_cone_cmd]) if hasattr(dev, "_last_cone_cmd") else b"\x00"
        if key == (Mcu.NANO, NANO_STRING_CMD):
            return bytes([dev._last_string_cmd]) if hasattr(dev, "_last_string_cmd") else b"\x00"
        if key == (Mcu.MEGA, MEGA_MAGNET):
            return bytes([1 if st.upper.magnet_on else 0])
        if key == (Mcu.MEGA, MEGA_LIMITS):
            bits = (
                (0x01 if st.upper.x_homed else 0)
                | (0x02 if st.upper.z_homed else 0)
                | (0x04 if st.upper.yaw_homed else 0)
            )
            return bytes([bits])
        if key == (Mcu.MEGA, MEGA_X_TARGET):
            return struct.pack("<H", int(round(st.upper.x)) & 0xFFFF)
        if key == (Mcu.MEGA, MEGA_Z_TARGET):
            return struct.pack("<H", int(round(st.upper.z)) & 0xFFFF)
        if key == (Mcu.MEGA, MEGA_YAW_TARGET):
            return struct.pack("<H", int(round(st.upper.yaw)) % 360)
        raise UnknownRegister(f"{Mcu(mcu).name} register 0x{addr:02x}")

    def write(self, mcu: Mcu, addr: int, value: bytes) -> None:
        key = (Mcu(mcu), addr)
        if key not in self._WIDTHS:
            raise UnknownRegister(f"{Mcu(mcu).name} register 0x{addr:02x}")
        if key in self._READ_ONLY:
            raise ReadOnlyRegister(f"{Mcu(mcu).name} register 0x{addr:02x} is read-only")
        if len(value) != self._WIDTHS[key]:
            raise RegisterError(
                f"register 0x{addr:02x} expects {self._WIDTHS[key]} byte(s), got {len(value)}"
            )
        dev = self.device
        if dev.estop:
            raise EstopEngaged("command write rejected: e-stop engaged")
        if key == (Mcu.NANO, NANO_CONE_CMD):
            dev._last_cone_cmd = value[0]
            if value[0] == 1:
                dev.start_cone_command(up=True)
            elif value[0] == 2:
                dev.start_cone_command(up=False)
            else:
                raise RegisterError(f"bad cone command {value[0]}")
        elif key == (Mcu.NANO, NANO_STRING_CMD):
            dev._last_string_cmd = value[0]
            if value[0] == 1:
                dev.start_string_command(retract=True)
            elif value[0] == 2:
                dev.start_string_command(retract=False)
            else:
                raise RegisterError(f"bad string command {value[0]}")
        elif key == (Mcu.MEGA, MEGA_MAGNET):
            dev.set_magnet(bool(value[0]))
        elif key == (Mcu.MEGA, MEGA_X_TARGET):
            dev.start_arm_axis("x", struct.unpack("<H", value)[0])
        elif key == (Mcu.MEGA, MEGA_Z_TARGET):
            dev.start_arm_axis("z", struct.unpack("<H", value)[0])
        elif key == (Mcu.MEGA, MEGA_YAW_TARGET):
            dev.start_arm_axis("yaw", struct.unpack("<H", value)[0])


def register_access(regmap: RegisterMap, rw: str, mcu: Mcu, addr: int, value: bytes = b"") -> bytes:
    """Single entry point mirroring a raw register transaction."""
    if rw == "read":
        return regmap.read(mcu, addr)
    if rw == "write":
        regmap.write(mcu, addr, value)
        return b""
    raise ValueError(f"rw must be 'read' or 'write', got {rw!r}")


# ---------------------------------------------------------------------------
# action servers

class ActionServer:
    """Base framing/lifecycle logic: feed bytes in, poll simulated time, drain bytes out."""

    def __init__(self):
        self._deframer = Deframer()
        self._out = bytearray()
        self._finished_ids: set[int] = set()

    def feed(self, data: bytes) -> None:
        for msg_type, payload in self._deframer.feed(data):
            try:
                msg = decode_message(msg_type, payload)
            except (MessageFormatError, ValueError):
                # CRC-valid goal with undecodable params still owes its result
                if msg_type == MsgKind.GOAL and len(payload) >= 5:
                    (aid,) = struct.unpack_from("<I", payload, 0)
                    if aid not in self._finished_ids:
                        self._send_result(aid, payload[4], False, "Internal")
                continue
            if msg.kind is MsgKind.GOAL:
                if msg.action_id in self._finished_ids:
                    continue  # one result per goal, ever
                self._on_goal(msg)
            elif msg.kind is MsgKind.CANCEL:
                self._on_cancel(msg.action_id)

    def take_output(self) -> bytes:
        out = bytes(self._out)
        self._out.clear()
        return out

    def poll(self, budget_ms: float) -> bytes:
        self._advance(budget_ms)
        return self.take_output()

    def _send(self, msg: ActionMessage) -> None:
        self._out.extend(encode_message(msg))

    def _send_feedback(self, action_id: int, op: int, stage: str) -> None:
        if stage in STAGE_CODE:
            self._send(ActionMessage(MsgKind.FEEDBACK, action_id, op, {"stage": stage}))

    def _send_result(self, action_id: int, op: int, ok: bool, detail: str = "Ok", **extra) -> None:
        self._finished_ids.add(action_id)
        params = {"status": "success" if ok else "fail", "detail": detail}
        params.update(extra)
        self._send(ActionMessage(MsgKind.RESULT, action_id, op, params))

    def _on_goal(self, msg: ActionMessage) -> None:
        raise NotImplementedError

    def _on_cancel(self, action_id: int) -> None:
        pass

    def _advance(self, budget_ms: float) -> None:
        pass


@dataclass
class _ActiveGoal:
    action_id: int
    op: int
    handle: CommandHandle
    stages_sent: int = 0


class DeviceServer(ActionServer):
    """Serves a GrmDevice over the action protocol, one motion goal at a time."""

    def __init__(self, device: GrmDevice):
        super().__init__()
        self.device = device
        self.registers = RegisterMap(device)
        self._active: Optional[_ActiveGoal] = None

    _STARTERS = {
        OpCode.LOWER_RESET: lambda dev, p: dev.start_lower_reset(p["target_deg"], p["seed"]),
        OpCode.SWAP: lambda dev, p: dev.start_swap_object(p["slot"]),
        OpCode.HOME: lambda dev, p: dev.start_home_all(),
        OpCode.ROTATE: lambda dev, p: dev.start_rotate_platform(p["target_deg"]),
    }

    def _on_goal(self, msg: ActionMessage) -> None:
        op = msg.op_code
        if op == OpCode.READ_STATE:
            self._send_result(msg.action_id, op, True, state=self.device.read_state())
            return
        if op == OpCode.SET_OBJECT_POSE:
            try:
                self.device.set_object_pose(msg.params["pose"], msg.params.get("elapsed_ms", 0.0))
                self._send_result(msg.action_id, op, True)
            except DeviceError as e:
                self._send_result(msg.action_id, op, False, e.detail)
            return
        if op == OpCode.ESTOP:
            engaged = msg.params["engaged"]
            self.device.set_estop(engaged)
            if engaged and self._active is not None:
                # the interrupted goal still gets its one (failing) result
                self._drain_active()
            self._send_result(msg.action_id, op, True)
            return
        starter = self._STARTERS.get(op)
        if starter is None:
            self._send_result(msg.action_id, op, False, "UnknownOp")
            return
        if self._active is not None:
            self._send_result(msg.action_id, op, False, "Busy")
            return
        try:
            handle = starter(self.device, msg.params)
        except DeviceError as e:
            self._send_result(msg.action_id, op, False, e.detail)
            return
        except (ValueError, KeyError):
            self._send_result(msg.action_id, op, False, "Internal")
            return
        self._active = _ActiveGoal(msg.action_id, op, handle)

    def _on_cancel(self, action_id: int) -> None:
        if self._active is not None and self._active.action_id == action_id:
            self.device.abort_active()
            self._drain_active()

    def _advance(self, budget_ms: float) -> None:
        if self._active is None:
            return
        if budget_ms > 0 and self.device.busy:
            self.device.tick(budget_ms)
        self._drain_active()

    def _drain_active(self) -> None:
        active = self._active
        if active is None:
            return
        handle = active.handle
        for _, stage in handle.stages[active.stages_sent :]:
            self._send_feedback(active.action_id, active.op, stage)
            active.stages_sent += 1
        if handle.status is CommandStatus.DONE:
            self._send_result(active.action_id, active.op, True)
            self._active = None
        elif handle.status is CommandStatus.FAILED:
            detail = handle.error.detail if handle.error else "Internal"
            self._send_result(active.action_id, active.op, False, detail)
            self._active = None

    def pending_sim_ms(self) -> Optional[float]:
        if self._active is None:
            return None
        return self.device.next_event_ms()


# ---------------------------------------------------------------------------
# client

_DEFAULT_DEADLINES_MS = {
    OpCode.LOWER_RESET: 120_000.0,
    OpCode.SWAP: 120_000.0,
    OpCode.EXECUTE_GRASP: 120_000.0,
}
_FALLBACK_DEADLINE_MS = 30_000.0


@dataclass
class ActionOutcome:
    action_id: int
    op_code: int
    ok: bool
    detail: str
    feedback: list[str]
    params: dict

    @property
    def state(self) -> Optional[DeviceState]:
        return self.params.get("state")


class ActionClient:
    """Single-outstanding-goal client over a duplex byte transport."""

    def __init__(self, transport, pump_step_ms: float = 250.0):
        self.transport = transport
        self.pump_step_ms = pump_step_ms
        self._deframer = Deframer()
        self._next_id = 1

    def _allocate_id(self) -> int:
        aid = self._next_id
        self._next_id += 1
        return aid

    def send_cancel(self, action_id: int) -> None:
        self.transport.send(encode_message(ActionMessage(MsgKind.CANCEL, action_id)))

    def execute(
        self,
        op: OpCode,
        params: dict | None = None,
        deadline_ms: float | None = None,
        on_feedback: Callable[[int, str], None] | None = None,
    ) -> ActionOutcome:
        """Send one goal and block until its Result arrives."""
        aid = self._allocate_id()
        goal = ActionMessage(MsgKind.GOAL, aid, int(op), params or {})
        self.transport.send(encode_message(goal))
        budget = deadline_ms if deadline_ms is not None else _DEFAULT_DEADLINES_MS.get(
            op, _FALLBACK_DEADLINE_MS
        )
        feedback: list[str] = []
        while True:
            for msg_type, payload in self._deframer.feed(self.transport.recv()):
                try:
                    msg = decode_message(msg_type, payload)
                except (MessageFormatError, ValueError):
                    continue
                if msg.action_id != aid:
                    continue
                if msg.kind is MsgKind.FEEDBACK:
                    feedback.append(msg.params["stage"])
                    if on_feedback is not None:
                        on_feedback(aid, msg.params["stage"])
                elif msg.kind is MsgKind.RESULT:
                    return ActionOutcome(
                        action_id=aid,
                        op_code=msg.op_code,
                        ok=msg.params["status"] == "success",
                        detail=msg.params["detail"],
                        feedback=feedback,
                        params=msg.params,
                    )
            if budget <= 0:
                raise ActionTimeout(f"no result for op {op!r} within deadline")
            step = min(self.pump_step_ms, budget)
            self.transport.pump(step)
            budget -= step

    def read_state(self) -> DeviceState:
        outcome = self.execute(OpCode.READ_STATE)
        if not outcome.ok or outcome.state is None:
            raise ProtocolError(f"read_state failed: {outcome.detail}")
        return outcome.state


# ---------------------------------------------------------------------------
# transports

class InprocTransport:
    """Client endpoint wired directly to an in-process ActionServer."""

    def __init__(self, server: ActionServer):
        self.server = server
        self._closed = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("transport closed")
        self.server.feed(data)

    def recv(self) -> bytes:
        if self._closed:
            raise TransportClosed("transport closed")
        return self.server.poll(0.0)

    def pump(self, sim_ms: float) -> None:
        self.server._advance(sim_ms)

    def close(self) -> None:
        self._closed = True


class TcpTransport:
    """Client endpoint over a TCP socket; pump waits wall-clock time."""

    def __init__(self, host: str, port: int, connect_timeout_s: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout_s)
        self.sock.setblocking(False)

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise TransportClosed(str(e)) from e

    def recv(self) -> bytes:
        chunks = []
        while True:
            try:
                chunk = self.sock.recv(65536)
            except BlockingIOError:
                break
            except OSError as e:
                raise TransportClosed(str(e)) from e
            if not chunk:
                if chunks:
                    break
                raise TransportClosed("peer closed connection")
            chunks.append(chunk)
        return b"".join(chunks)

    def pump(self, sim_ms: float) -> None:
        # over TCP the server ticks itself; just wait for bytes
        select.select([self.sock], [], [], min(sim_ms, 50.0) / 1000.0)

    def close(self) -> None:
        self.sock.close()


class TcpServerRunner:
    """Serves one ActionServer on a TCP listener, one connection at a time."""

    def __init__(self, server: ActionServer, host: str = "127.0.0.1", port: int = 0,
                 poll_sim_ms: float = 2000.0):
        self.server = server
        self.poll_sim_ms = poll_sim_ms
        self.listener = socket.create_server((host, port))
        self.listener.settimeout(0.2)
        self.host, self.port = self.listener.getsockname()[:2]
        self._stop = False

    def stop(self) -> None:
        self._stop = True

    def serve_forever(self) -> None:
        try:
            while not self._stop:
                try:
                    conn, _ = self.listener.accept()
                except socket.timeout:
                    continue
                with conn:
                    self._serve_connection(conn)
        finally:
            self.listener.close()

    def _serve_connection(self, conn: socket.socket) -> None:
        conn.setblocking(False)
        while not self._stop:
            busy = isinstance(self.server, DeviceServer) and self.server._active is not None
            timeout = 0.0 if busy else 0.05
            readable, _, _ = select.select([conn], [], [], timeout)
            if readable:
                try:
                    data = conn.recv(65536)
                except OSError:
                    return
                if not data:
                    return
                self.server.feed(data)
            out = self.server.poll(self.poll_sim_ms)
            if out:
                try:
                    conn.sendall(out)
                except OSError:
                    return

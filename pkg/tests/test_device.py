import random

import pytest

from grmsim.device import (
    CommandStatus,
    ConePhase,
    ConeNotRaised,
    DeviceBusy,
    DeviceConfig,
    EstopEngaged,
    GrmDevice,
    NoFreeSlot,
    NotHomed,
    SequenceTimeout,
    SlotEmpty,
    SwapIncompatible,
    TetherLimit,
)
from grmsim.types import ObjectSpec, Pose2D, Shape


class TestConfig:
    def test_shipped_device_config_loads(self):
        from importlib import resources
        from grmsim.device import load_device_config
        with resources.as_file(resources.files("grmsim.data").joinpath("device.cfg")) as p:
            cfg = load_device_config(p)
        assert cfg == DeviceConfig()

    def test_overrides(self):
        cfg = DeviceConfig()
        cfg.apply_overrides(["sigma_xy_mm=0.1", "storage_slots=8"])
        assert cfg.sigma_xy_mm == 0.1
        assert cfg.storage_slots == 8
        with pytest.raises(ValueError):
            cfg.apply_overrides(["bogus_knob=1"])
        with pytest.raises(ValueError):
            cfg.apply_overrides(["platform_rate_deg_s=-3"])


class TestTick:
    def test_rejects_nonpositive_dt(self, make_device):
        dev = make_device()
        with pytest.raises(ValueError):
            dev.tick(0)
        with pytest.raises(ValueError):
            dev.tick(-5)

    def test_cone_raise_rate_and_limit_event(self, make_device):
        # 10 mm/s over a 30 mm stroke: 25 mm after 2.5 s, done within the next second
        dev = make_device()
        dev.start_cone_command(up=True)
        dev.tick(2500)
        st = dev.read_state()
        assert st.lower.cone is ConePhase.RAISING
        assert st.lower.cone_height == pytest.approx(25.0)
        dev.tick(1000)
        st = dev.read_state()
        assert st.lower.cone is ConePhase.RAISED
        assert st.lower.cone_height == pytest.approx(30.0)
        limit_events = [e for e in dev.events if e[1] == "limit" and e[2] == "cone_up"]
        assert limit_events == [(3000.0, "limit", "cone_up")]

    def test_estop_freezes_everything_but_clock(self, make_device):
        dev = make_device(initial_pose=Pose2D(100, 50, 20))
        dev.start_home_platform()
        dev.tick(1000)  # mid-homing
        dev.set_estop(True)
        before = dev.read_state()
        for dt in (1, 10, 500, 12345):
            dev.tick(dt)
        after = dev.read_state()
        assert after.clock == before.clock + 1 + 10 + 500 + 12345
        assert after.lower == before.lower
        assert after.upper == before.upper
        assert after.object_pose == before.object_pose

    def test_clock_advances_when_idle(self, make_device):
        dev = make_device()
        dev.tick(250)
        assert dev.clock == 250


class TestHoming:
    def test_home_from_arbitrary_angle(self, make_device):
        dev = make_device(initial_pose=Pose2D(0, 0, 123.4))
        elapsed = dev.home_platform()
        st = dev.read_state()
        assert st.lower.platform_angle == 0.0
        assert st.lower.platform_homed
        # forward travel to the datum: (360 - 123.4) deg at 30 deg/s
        assert elapsed == pytest.approx((360.0 - 123.4) / 30.0 * 1000.0)

    def test_home_from_zero_is_immediate(self, make_device):
        dev = make_device()
        elapsed = dev.home_platform()
        assert elapsed == 0.0
        assert dev.read_state().lower.platform_angle == 0.0

    def test_home_requires_estop_clear(self, make_device):
        dev = make_device()
        dev.set_estop(True)
        before = dev.read_state()
        with pytest.raises(EstopEngaged):
            dev.home_platform()
        after = dev.read_state()
        assert after.lower == before.lower

    def test_homing_convergence_sweep(self, make_device):
        rng = random.Random(42)
        for _ in range(200):
            angle = rng.uniform(0, 360)
            dev = make_device(initial_pose=Pose2D(0, 0, angle))
            elapsed = dev.home_platform()
            st = dev.read_state()
            assert st.lower.platform_angle == 0.0
            assert st.lower.platform_homed
            assert elapsed <= 360.0 / 30.0 * 1000.0  # at most one revolution


class TestRotate:
    def test_rotate_requires_homing(self, make_device):
        dev = make_device()
        with pytest.raises(NotHomed):
            dev.rotate_platform(45)

    def test_rotate_to_table_angle(self, make_device):
        dev = make_device()
        dev.home_platform()
        elapsed = dev.rotate_platform(45.0)
        st = dev.read_state()
        assert st.lower.platform_angle == 45.0
        assert st.lower.encoder_ticks == 45
        assert elapsed == pytest.approx(45.0 / 30.0 * 1000.0)

    def test_rotate_identity_is_free(self, make_device):
        dev = make_device()
        dev.home_platform()
        assert dev.rotate_platform(0.0) == 0.0

    def test_quantization_round_half_even(self, make_device):
        # 2 deg/tick: 45 deg = 22.5 ticks -> 22 ticks -> 44 deg
        dev = make_device(config=DeviceConfig(deg_per_tick=2.0))
        dev.home_platform()
        dev.rotate_platform(45.0)
        assert dev.read_state().lower.platform_angle == 44.0

    def test_angle_is_tick_multiple_after_rotate(self, make_device):
        rng = random.Random(3)
        dev = make_device()
        dev.home_platform()
        for _ in range(25):
            dev.rotate_platform(rng.uniform(0, 360))
            angle = dev.read_state().lower.platform_angle
            assert angle == pytest.approx(round(angle))


class TestRetract:
    def test_straight_line_drag_at_limit(self, make_device):
        dev = make_device(initial_pose=Pose2D(300, 400, 10))  # exactly 500 mm
        dev.start_cone_command(up=True)
        dev.run_active()
        elapsed = dev.retract_string()
        st = dev.read_state()
        assert st.object_pose.x == 0.0 and st.object_pose.y == 0.0
        assert st.lower.string_home
        assert st.lower.string_out == 0.0
        assert elapsed == pytest.approx(5000.0)  # 500 mm at 100 mm/s

    def test_already_home_is_instant(self, make_device):
        dev = make_device()
        dev.start_cone_command(up=True)
        dev.run_active()
        assert dev.retract_string() == 0.0
        assert dev.read_state().lower.string_home

    def test_beyond_tether(self, make_device):
        dev = make_device(initial_pose=Pose2D(400, 400, 0))  # ~565.7 mm
        dev.start_cone_command(up=True)
        dev.run_active()
        with pytest.raises(TetherLimit):
            dev.retract_string()

    def test_requires_raised_cone(self, make_device):
        dev = make_device(initial_pose=Pose2D(100, 0, 0))
        with pytest.raises(ConeNotRaised):
            dev.retract_string()

    def test_string_out_strictly_decreasing_during_retraction(self, make_device):
        dev = make_device(initial_pose=Pose2D(300, 400, 0))
        dev.start_cone_command(up=True)
        dev.run_active()
        dev.start_retract_string()
        seen = [dev.read_state().lower.string_out]
        while dev.busy:
            dev.tick(250)
            seen.append(dev.read_state().lower.string_out)
        assert all(b < a for a, b in zip(seen, seen[1:]))
        assert seen[-1] == 0.0


class TestLowerReset:
    def test_full_sequence_with_noise_bounds(self, make_device):
        dev = make_device(initial_pose=Pose2D(120, -80, 77.0))
        dev.lower_reset(30.0, seed=123)
        st = dev.read_state()
        cfg = dev.config
        assert abs(st.object_pose.x) < 6 * cfg.sigma_xy_mm
        assert abs(st.object_pose.y) < 6 * cfg.sigma_xy_mm
        dtheta = (st.object_pose.theta - 30.0 + 180) % 360 - 180
        assert abs(dtheta) < 6 * cfg.sigma_theta_deg
        assert st.lower.platform_angle == 30.0
        assert st.lower.platform_homed

    def test_noiseless_reset_is_exact(self, make_device):
        cfg = DeviceConfig(sigma_xy_mm=0.0, sigma_theta_deg=0.0)
        dev = make_device(config=cfg, initial_pose=Pose2D(10, 10, 99))
        dev.lower_reset(0.0, seed=1)
        st = dev.read_state()
        assert st.object_pose == Pose2D(0.0, 0.0, 0.0)

    def test_same_seed_same_state(self, make_device):
        states = []
        for _ in range(2):
            dev = make_device(initial_pose=Pose2D(55, -30, 200))
            dev.lower_reset(45.0, seed=99)
            states.append(dev.read_state())
        assert states[0] == states[1]

    def test_different_seeds_differ(self, make_device):
        poses = []
        for seed in (1, 2):
            dev = make_device()
            dev.lower_reset(0.0, seed=seed)
            poses.append(dev.read_state().object_pose)
        assert poses[0] != poses[1]

    def test_homes_only_when_needed(self, make_device):
        dev = make_device()
        dev.lower_reset(0.0, seed=5)
        assert any(s == "platform_homed" for _, s in dev.active_handle.stages)
        h = dev.start_lower_reset(15.0, seed=6)
        dev.run_active()
        assert not any(s == "platform_homed" for _, s in h.stages)

    def test_reset_noise_statistics(self, make_device):
        # 2000 resets: sample stds should sit near the configured sigmas
        dev = make_device()
        xs, ys, ts = [], [], []
        for i in range(2000):
            dev.lower_reset(0.0, seed=i)
            p = dev.read_state().object_pose
            xs.append(p.x)
            ys.append(p.y)
            ts.append((p.theta + 180) % 360 - 180)
        import statistics
        assert statistics.stdev(xs) == pytest.approx(0.05, rel=0.10)
        assert statistics.stdev(ys) == pytest.approx(0.05, rel=0.10)
        assert statistics.stdev(ts) == pytest.approx(2.0, rel=0.10)

    def test_stage_deadline_trips(self, make_device):
        cfg = DeviceConfig(stage_deadline_ms=1000.0)  # cone raise needs 3000 ms
        dev = make_device(config=cfg)
        dev.start_lower_reset(0.0, seed=1)
        with pytest.raises(SequenceTimeout):
            dev.run_active()


class TestSwap:
    def test_swap_exchanges_platform_and_slot(self, make_device):
        dev = make_device(platform_object="rect", storage=("tri", "cyl", "cone"))
        dev.home_all()
        dev.swap_object(1)  # cyl
        st = dev.read_state()
        assert st.object_on_platform == "cyl"
        assert "rect" in st.storage_slots
        assert st.storage_slots[1] is None or st.storage_slots[1] != "cyl"

    def test_swap_conserves_object_multiset(self, make_device):
        dev = make_device()
        dev.home_all()
        before = sorted(
            [dev.read_state().object_on_platform]
            + [s for s in dev.read_state().storage_slots if s]
        )
        for slot in (0, 1, 2):
            st = dev.read_state()
            if st.storage_slots[slot] is None:
                continue
            dev.swap_object(slot)
        after_state = dev.read_state()
        after = sorted(
            [after_state.object_on_platform]
            + [s for s in after_state.storage_slots if s]
        )
        assert before == after
        assert after_state.upper.holding is None

    def test_empty_slot(self, make_device):
        dev = make_device()
        dev.home_all()
        before = dev.read_state()
        with pytest.raises(SlotEmpty):
            dev.swap_object(5)
        assert dev.read_state() == before

    def test_requires_upper_homing(self, make_device):
        dev = make_device()
        dev.home_platform()
        with pytest.raises(NotHomed):
            dev.swap_object(0)

    def test_heavy_object_rejected(self, objects):
        heavy = ObjectSpec(
            id="brick", shape=Shape.RECT_PRISM, width=40, depth=40, height=100,
            mass=600.0, footprint=((-20, -20), (20, -20), (20, 20), (-20, 20)),
        )
        objs = dict(objects, brick=heavy)
        dev = GrmDevice(objects=objs, platform_object="brick", storage=["rect"])
        dev.home_all()
        with pytest.raises(SwapIncompatible):
            dev.swap_object(0)

    def test_no_free_slot(self, objects):
        cfg = DeviceConfig(storage_slots=3)
        dev = GrmDevice(
            config=cfg, objects=objects, platform_object="rect",
            storage=["tri", "cyl", "cone"],
        )
        dev.home_all()
        with pytest.raises(NoFreeSlot):
            dev.swap_object(0)


class TestEstop:
    def test_engage_mid_rotation_freezes_on_tick(self, make_device):
        dev = make_device()
        dev.home_platform()
        dev.start_rotate_platform(90.0)
        dev.tick(1000)  # 30 deg in
        dev.set_estop(True)
        st = dev.read_state()
        assert st.lower.platform_angle == pytest.approx(30.0)
        assert st.lower.platform_angle == round(st.lower.platform_angle)  # frozen on a tick
        with pytest.raises(EstopEngaged):
            dev.rotate_platform(45.0)

    def test_read_state_works_engaged(self, make_device):
        dev = make_device()
        dev.set_estop(True)
        st = dev.read_state()
        assert st.estop

    def test_release_requires_rehoming(self, make_device):
        dev = make_device()
        dev.home_all()
        dev.set_estop(True)
        dev.set_estop(False)
        st = dev.read_state()
        assert not st.lower.platform_homed
        assert not st.upper.all_homed
        with pytest.raises(NotHomed):
            dev.rotate_platform(45.0)
        dev.home_platform()
        dev.rotate_platform(45.0)
        assert dev.read_state().lower.platform_angle == 45.0

    def test_active_command_fails_on_engage(self, make_device):
        dev = make_device(initial_pose=Pose2D(200, 0, 0))
        handle = dev.start_lower_reset(0.0, seed=1)
        dev.tick(500)
        dev.set_estop(True)
        assert handle.status is CommandStatus.FAILED
        assert isinstance(handle.error, EstopEngaged)


class TestReadState:
    def test_fresh_device(self, make_device):
        st = make_device().read_state()
        assert st.lower.cone is ConePhase.LOWERED
        assert not st.lower.platform_homed
        assert not st.upper.all_homed
        assert not st.estop
        assert st.clock == 0.0

    def test_snapshot_is_independent(self, make_device):
        dev = make_device()
        st = dev.read_state()
        dev.home_platform()
        dev.rotate_platform(30)
        assert st.lower.platform_angle == 0.0  # old snapshot unchanged

    def test_busy_guard(self, make_device):
        dev = make_device(initial_pose=Pose2D(100, 0, 0))
        dev.start_lower_reset(0.0, seed=1)
        with pytest.raises(DeviceBusy):
            dev.start_home_platform()
        dev.run_active()

import math

import pytest
from hypothesis import given, strategies as st
from shapely.geometry import Polygon, box

from grmsim.manipulator import (
    ArmServer,
    GraspPlan,
    GripperModel,
    UnsupportedCombination,
    closure_width,
    decimate_preserving_min,
    execute_grasp_and_transport,
    grasped_pair_misalignment,
    plan_grasp,
)
from grmsim.objects import builtin_objects
from grmsim.protocol import ActionClient, InprocTransport, OpCode
from grmsim.types import GraspType, PerturbAxis, Pose2D, TrialSpec, grasp_succeeded


@pytest.fixture(scope="module")
def g():
    return GripperModel()


@pytest.fixture(scope="module")
def rect():
    return builtin_objects()["rect"]


def spec_for(axis, value, grasp=GraspType.TOP, angle=0.0, obj="rect"):
    return TrialSpec(1, obj, angle, grasp, axis, value)


ORIGIN = Pose2D(0.0, 0.0, 0.0)


class TestPlanGrasp:
    def test_y_translation_offsets_pose(self, rect, g):
        pose = Pose2D(5.0, -2.0, 0.0)
        plan = plan_grasp(spec_for(PerturbAxis.Y_TRANS, 30.0), rect, pose, g)
        assert plan.pose.y == pose.y + 30.0
        assert plan.pose.x == pose.x
        assert plan.approach_tilt == 0.0
        assert plan.closing_axis == pytest.approx((1.0, 0.0))

    def test_y_rotation_tilts_approach(self, rect, g):
        plan = plan_grasp(spec_for(PerturbAxis.Y_ROT, 33.0), rect, ORIGIN, g)
        assert plan.approach_tilt == 33.0
        assert plan.pose.pitch == 33.0

    def test_side_z_rotation_spins_closing_axis(self, rect, g):
        plan = plan_grasp(spec_for(PerturbAxis.Z_ROT, 60.0, GraspType.SIDE), rect, ORIGIN, g)
        angle = math.degrees(math.atan2(plan.closing_axis[1], plan.closing_axis[0]))
        assert angle == pytest.approx(90.0 + 60.0)
        assert plan.approach_tilt == 0.0

    def test_side_x_rotation_is_a_roll(self, rect, g):
        plan = plan_grasp(spec_for(PerturbAxis.X_ROT, 40.0, GraspType.SIDE), rect, ORIGIN, g)
        assert plan.approach_tilt == 0.0
        assert plan.pose.roll == 40.0
        assert plan.closing_axis == pytest.approx((0.0, 1.0))

    def test_top_grasp_height_is_mid_height(self, rect, g):
        plan = plan_grasp(spec_for(PerturbAxis.X_TRANS, 0.0), rect, ORIGIN, g)
        assert plan.pose.z == rect.height / 2.0

    def test_unsupported_combinations_rejected(self, rect, g):
        for grasp, axis in [
            (GraspType.TOP, PerturbAxis.Z_TRANS),
            (GraspType.SIDE, PerturbAxis.Z_TRANS),
            (GraspType.SIDE, PerturbAxis.Y_TRANS),
            (GraspType.SIDE, PerturbAxis.Y_ROT),
        ]:
            with pytest.raises(UnsupportedCombination):
                plan_grasp(spec_for(axis, 1.0, grasp), rect, ORIGIN, g)


class TestClosureWidth:
    def test_centered_cube(self, rect, g):
        plan = plan_grasp(spec_for(PerturbAxis.X_TRANS, 0.0), rect, ORIGIN, g)
        assert closure_width(plan, rect, ORIGIN, g) == pytest.approx(40.0)

    def test_pad_window_misses_cube(self, rect, g):
        # sweep spans y in [30, 70]; the cube spans y in [-20, 20]
        plan = plan_grasp(spec_for(PerturbAxis.Y_TRANS, 50.0), rect, ORIGIN, g)
        assert closure_width(plan, rect, ORIGIN, g) == 0.0

    def test_pad_window_clips_cube_edge(self, rect, g):
        # sweep y in [10, 50] overlaps the cube strip y in [10, 20]: full 40 mm along x
        plan = plan_grasp(spec_for(PerturbAxis.Y_TRANS, 30.0), rect, ORIGIN, g)
        assert closure_width(plan, rect, ORIGIN, g) == pytest.approx(40.0)

    def test_symmetry_under_180_flip(self, g):
        # flipping both the closing axis and the footprint changes nothing
        objs = builtin_objects()
        for oid in ("rect", "tri", "cyl"):
            obj = objs[oid]
            for theta in (0.0, 20.0, 45.0):
                pose = Pose2D(3.0, -4.0, theta)
                flipped = Pose2D(3.0, -4.0, theta + 180.0)
                plan = GraspPlan(
                    pose=plan_grasp(spec_for(PerturbAxis.X_TRANS, 5.0), obj, pose, g).pose,
                    closing_axis=(1.0, 0.0),
                    grasp_type=GraspType.TOP,
                    approach_tilt=0.0,
                )
                plan_flipped = GraspPlan(
                    pose=plan.pose, closing_axis=(-1.0, 0.0),
                    grasp_type=GraspType.TOP, approach_tilt=0.0,
                )
                w1 = closure_width(plan, obj, pose, g)
                w2 = closure_width(plan_flipped, obj, flipped, g)
                assert w1 == pytest.approx(w2, abs=1e-9)

    @given(
        theta=st.floats(min_value=0, max_value=360, allow_nan=False),
        dx=st.floats(min_value=-60, max_value=60, allow_nan=False),
        dy=st.floats(min_value=-60, max_value=60, allow_nan=False),
        axis_deg=st.floats(min_value=0, max_value=360, allow_nan=False),
    )
    def test_matches_shapely_oracle(self, theta, dx, dy, axis_deg):
        g = GripperModel()
        obj = builtin_objects()["tri"]
        a = math.radians(axis_deg)
        plan = GraspPlan(
            pose=plan_grasp(spec_for(PerturbAxis.X_TRANS, 0.0), obj,
                            Pose2D(dx, dy, theta), g).pose,
            closing_axis=(math.cos(a), math.sin(a)),
            grasp_type=GraspType.TOP,
            approach_tilt=0.0,
        )
        ours = closure_width(plan, obj, Pose2D(dx, dy, theta), g)
        # independent oracle: rotate world so the closing axis is +x, use shapely
        rot = math.radians(theta)
        world = Polygon([
            (math.cos(rot) * x - math.sin(rot) * y + dx,
             math.sin(rot) * x + math.cos(rot) * y + dy)
            for x, y in obj.footprint
        ])
        ca, sa = math.cos(-a), math.sin(-a)
        local = Polygon([
            (ca * (px - plan.pose.x) - sa * (py - plan.pose.y),
             sa * (px - plan.pose.x) + ca * (py - plan.pose.y))
            for px, py in world.exterior.coords
        ])
        window = box(-g.max_opening / 2, -g.pad_length / 2,
                     g.max_opening / 2, g.pad_length / 2)
        inter = local.intersection(window)
        expected = 0.0 if inter.is_empty else inter.bounds[2] - inter.bounds[0]
        assert ours == pytest.approx(expected, abs=1e-6)


class TestExecution:
    def test_tilt_inside_friction_cone_succeeds(self, rect, g):
        # atan(0.65) ~ 33.0 deg: 30 deg holds through transport
        spec = spec_for(PerturbAxis.Y_ROT, 30.0)
        out = execute_grasp_and_transport(plan_grasp(spec, rect, ORIGIN, g), rect, ORIGIN, g)
        assert out.success
        assert out.final_object_pose == Pose2D(250.0, 0.0, 0.0)
        assert min(w for _, w in out.trajectory) >= g.min_read_closed

    def test_tilt_beyond_friction_cone_fails(self, rect, g):
        spec = spec_for(PerturbAxis.Y_ROT, 40.0)
        out = execute_grasp_and_transport(plan_grasp(spec, rect, ORIGIN, g), rect, ORIGIN, g)
        assert not out.success
        # the collapse shows up in the trace, below the fully-closed threshold
        assert min(w for _, w in out.trajectory) < g.min_read_closed
        assert out.final_object_pose == ORIGIN

    def test_empty_closure_reads_fully_closed(self, rect, g):
        spec = spec_for(PerturbAxis.Y_TRANS, 50.0)
        out = execute_grasp_and_transport(plan_grasp(spec, rect, ORIGIN, g), rect, ORIGIN, g)
        assert not out.success
        assert out.trajectory[-1][1] < g.min_read_closed

    def test_zero_perturbation_centered_grasps_succeed(self, g):
        for oid, obj in builtin_objects().items():
            for grasp in (GraspType.TOP, GraspType.SIDE):
                spec = spec_for(PerturbAxis.X_TRANS, 0.0, grasp, obj=oid)
                plan = plan_grasp(spec, obj, ORIGIN, g)
                out = execute_grasp_and_transport(plan, obj, ORIGIN, g)
                assert out.success, (oid, grasp)

    def test_success_equals_trajectory_criterion(self, g):
        # the verdict and the trace can never disagree
        objs = builtin_objects()
        cases = [
            (PerturbAxis.Y_ROT, v, GraspType.TOP, o)
            for v in (0.0, 20.0, 35.0, 80.0) for o in objs
        ] + [
            (PerturbAxis.X_TRANS, v, GraspType.SIDE, o)
            for v in (0.0, 25.0, 45.0) for o in objs
        ]
        for axis, v, grasp, oid in cases:
            spec = spec_for(axis, v, grasp, obj=oid)
            out = execute_grasp_and_transport(
                plan_grasp(spec, objs[oid], ORIGIN, g), objs[oid], ORIGIN, g)
            assert out.success == grasp_succeeded(out.trajectory, g.min_read_closed)

    def test_trajectory_time_monotonic_from_clock(self, rect, g):
        spec = spec_for(PerturbAxis.X_TRANS, 0.0)
        out = execute_grasp_and_transport(
            plan_grasp(spec, rect, ORIGIN, g), rect, ORIGIN, g, clock_ms=5000.0)
        ts = [t for t, _ in out.trajectory]
        assert ts[0] == 5000.0
        assert all(b > a for a, b in zip(ts, ts[1:]))
        assert out.elapsed_ms == pytest.approx(ts[-1] - ts[0])

    def test_grasped_pair_tracks_object_angle(self, g):
        objs = builtin_objects()
        # square at 45 deg: both face pairs sit 45 deg off the closing axis
        plan = plan_grasp(spec_for(PerturbAxis.X_TRANS, 0.0, angle=45.0), objs["rect"],
                          Pose2D(0, 0, 45.0), g)
        assert grasped_pair_misalignment(plan, objs["rect"], Pose2D(0, 0, 45.0)) == pytest.approx(45.0)
        # 32-gon: some face is always within half a facet (5.625 deg)
        mis = grasped_pair_misalignment(plan, objs["cyl"], Pose2D(0, 0, 13.0))
        assert mis <= 5.625 + 1e-9


class TestDecimation:
    def test_preserves_endpoints_and_min(self):
        # v-shaped opening profile: the true minimum sits mid-trajectory,
        # off any even sampling grid
        traj = tuple((float(i), abs(i - 70) + 0.5) for i in range(100))
        out = decimate_preserving_min(traj, 20)
        assert len(out) <= 20
        assert out[0] == traj[0]
        assert out[-1] == traj[-1]
        assert min(w for _, w in out) == min(w for _, w in traj) == 0.5

    def test_min_kept_at_every_position(self):
        for min_i in range(100):
            traj = tuple((float(i), 10.0 if i != min_i else 1.0) for i in range(100))
            out = decimate_preserving_min(traj, 13)
            assert len(out) <= 13
            assert out[0] == traj[0] and out[-1] == traj[-1]
            assert min(w for _, w in out) == 1.0, min_i

    def test_short_trajectories_untouched(self):
        traj = ((0.0, 85.0), (100.0, 40.0))
        assert decimate_preserving_min(traj, 56) == traj


class TestArmServer:
    def test_execute_grasp_over_protocol(self, g):
        objs = builtin_objects()
        client = ActionClient(InprocTransport(ArmServer(objs, g)))
        spec = spec_for(PerturbAxis.Y_ROT, 10.0)
        plan = plan_grasp(spec, objs["rect"], ORIGIN, g)
        out = client.execute(OpCode.EXECUTE_GRASP, {
            "object_id": "rect",
            "object_pose": ORIGIN,
            "grasp_type": spec.grasp_type,
            "plan_pose": plan.pose,
            "closing_axis": plan.closing_axis,
            "approach_tilt": plan.approach_tilt,
            "clock_ms": 1000.0,
        })
        assert out.ok
        assert out.params["success"] is True
        assert out.feedback == ["closure_done", "transport_done"]
        traj = out.params["trajectory"]
        assert traj[0][0] == 1000.0
        assert out.params["final_object_pose"].x == 250.0

    def test_unknown_object_fails(self, g):
        objs = builtin_objects()
        client = ActionClient(InprocTransport(ArmServer(objs, g)))
        plan = plan_grasp(spec_for(PerturbAxis.X_TRANS, 0.0), objs["rect"], ORIGIN, g)
        out = client.execute(OpCode.EXECUTE_GRASP, {
            "object_id": "sphere",
            "object_pose": ORIGIN,
            "grasp_type": GraspType.TOP,
            "plan_pose": plan.pose,
            "closing_axis": plan.closing_axis,
            "approach_tilt": 0.0,
            "clock_ms": 0.0,
        })
        assert not out.ok
        assert out.detail == "ObjectUnavailable"

    def test_wrong_op_rejected(self, g):
        client = ActionClient(InprocTransport(ArmServer(builtin_objects(), g)))
        out = client.execute(OpCode.HOME)
        assert not out.ok and out.detail == "UnknownOp"

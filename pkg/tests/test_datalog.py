import os
import random

import pytest

from grmsim.datalog import (
    CorruptManifest,
    DuplicateTrialId,
    MissingChannelFile,
    SessionClosed,
    SessionWriter,
    TimestampRegression,
    read_session,
)
from grmsim.types import GraspType, PerturbAxis, Pose2D, Pose6D, TrialRecord, TrialSpec


def make_record(tid: int, success=True, odd_floats=False) -> TrialRecord:
    x = 0.1 + 0.2 if odd_floats else 0.05  # 0.30000000000000004 round-trips exactly
    return TrialRecord(
        spec=TrialSpec(tid, "rect", 45.0, GraspType.TOP, PerturbAxis.Y_ROT,
                       30.0 / 7.0 if odd_floats else 10.0),
        reset_pose=Pose2D(x, -0.031, 44.7),
        grasp_pose=Pose6D(0.0, 0.0, 52.5, 0.0, 30.0, 0.0),
        gripper_trajectory=((1000.0, 85.0), (1100.0, 42.0), (3600.0, 40.0)),
        success=success,
        transport_target_offset=250.0,
        session_ref="s-test",
        wall_ticks=12500.0,
    )


class TestChannels:
    def test_append_then_read_identity(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s-test") as w:
            w.record_channel("gripper_state", 1000.0, {"opening": 85.0})
            w.record_channel("gripper_state", 1100.0, {"opening": 60.5})
        sess = read_session(tmp_path / "s")
        ch = sess.channels["gripper_state"]
        assert ch.samples == [(1000.0, {"opening": 85.0}), (1100.0, {"opening": 60.5})]
        assert ch.time_range == (1000.0, 1100.0)
        assert sess.truncations == 0

    def test_timestamp_regression_rejected(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.record_channel("c", 1000.0, {})
            with pytest.raises(TimestampRegression):
                w.record_channel("c", 900.0, {})
            w.record_channel("c", 1000.0, {})  # equal timestamps are fine

    def test_new_channel_grows_manifest(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.record_channel("top_cam", 0.0, {"frame": 0})
            n1 = sum(1 for ln in open(tmp_path / "s" / "manifest") if '"channel"' in ln)
            w.record_channel("side_cam", 0.0, {"frame": 0})
            n2 = sum(1 for ln in open(tmp_path / "s" / "manifest") if '"channel"' in ln)
        assert (n1, n2) == (1, 2)
        sess = read_session(tmp_path / "s")
        assert set(sess.channels) == {"top_cam", "side_cam"}

    def test_closed_writer_rejects_appends(self, tmp_path):
        w = SessionWriter(tmp_path / "s", "s")
        w.close()
        with pytest.raises(SessionClosed):
            w.record_channel("c", 0.0, {})
        with pytest.raises(SessionClosed):
            w.write_trial_record(make_record(1))


class TestTrialRecords:
    def test_round_trip_value_equality(self, tmp_path):
        recs = [make_record(1), make_record(2, success=False, odd_floats=True)]
        with SessionWriter(tmp_path / "s", "s-test") as w:
            for r in recs:
                w.write_trial_record(r)
        sess = read_session(tmp_path / "s")
        assert sess.trial_records == recs

    def test_duplicate_trial_id(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.write_trial_record(make_record(1))
            with pytest.raises(DuplicateTrialId):
                w.write_trial_record(make_record(1))

    def test_one_line_per_record(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            for i in range(1, 51):
                w.write_trial_record(make_record(i))
        lines = open(tmp_path / "s" / "trials.log").read().splitlines()
        assert len(lines) == 50


class TestReadRobustness:
    def test_truncated_channel_tail_dropped(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.record_channel("c", 0.0, {"v": 1})
            w.record_channel("c", 1.0, {"v": 2})
        path = tmp_path / "s" / "c.log"
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])  # chop mid-record
        sess = read_session(tmp_path / "s")
        assert sess.truncations == 1
        assert sess.channels["c"].samples == [(0.0, {"v": 1})]

    def test_manifest_lists_missing_channel(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.record_channel("c", 0.0, {})
        os.unlink(tmp_path / "s" / "c.log")
        with pytest.raises(MissingChannelFile):
            read_session(tmp_path / "s")

    def test_corrupt_manifest_detected(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.write_trial_record(make_record(1))
        mpath = tmp_path / "s" / "manifest"
        lines = mpath.read_text().splitlines()
        lines.insert(1, "this is not a record")
        mpath.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorruptManifest):
            read_session(tmp_path / "s")

    def test_missing_manifest(self, tmp_path):
        os.makedirs(tmp_path / "empty")
        with pytest.raises(CorruptManifest):
            read_session(tmp_path / "empty")

    def test_indexed_trial_must_resolve(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.write_trial_record(make_record(1))
        tpath = tmp_path / "s" / "trials.log"
        tpath.write_bytes(tpath.read_bytes()[:-20])  # kill the indexed record's tail
        with pytest.raises(CorruptManifest):
            read_session(tmp_path / "s")


class CrashingWriter(SessionWriter):
    """Counts low-level appends/syncs and hard-kills the process at a chosen op."""

    def __init__(self, *args, crash_at: int, **kw):
        self._ops = 0
        self._crash_at = crash_at
        super().__init__(*args, **kw)

    def _maybe_crash(self):
        self._ops += 1
        if self._ops >= self._crash_at:
            os._exit(17)

    def _append(self, f, line):
        # crash points both before and after the underlying write
        self._maybe_crash()
        super()._append(f, line)
        self._maybe_crash()

    def _sync(self, f):
        super()._sync(f)
        self._maybe_crash()


class TestCrashDurability:
    def test_kill_after_ack_never_loses_records(self, tmp_path):
        """Fork a child per crash point; every acked trial must be readable.

        The full 100-point sweep lives in the acceptance suite; this keeps a
        smaller always-on version in the unit tests.
        """
        rng = random.Random(1234)
        for case in range(30):
            crash_at = rng.randrange(3, 40)
            root = tmp_path / f"crash{case}"
            ack_r, ack_w = os.pipe()
            pid = os.fork()
            if pid == 0:  # child
                os.close(ack_r)
                status = 0
                try:
                    w = CrashingWriter(root, f"s{case}", crash_at=crash_at)
                    for i in range(1, 20):
                        if i % 3 == 0:
                            w.record_channel("c", float(i), {"i": i})
                        w.write_trial_record(make_record(i))
                        os.write(ack_w, b"%d\n" % i)  # ack only after durable return
                except BaseException:
                    status = 1
                os._exit(status)
            os.close(ack_w)
            with os.fdopen(ack_r, "rb") as f:
                acked = [int(x) for x in f.read().split()]
            os.waitpid(pid, 0)
            sess = read_session(root)
            got = {r.spec.trial_id for r in sess.trial_records}
            missing = set(acked) - got
            assert not missing, f"case {case} (crash_at={crash_at}): lost acked {missing}"

    def test_crash_mid_channel_line_is_recoverable(self, tmp_path):
        # simulate a partial channel write by appending half a record
        with SessionWriter(tmp_path / "s", "s") as w:
            w.record_channel("c", 0.0, {"v": 1})
            w.write_trial_record(make_record(1))
        with open(tmp_path / "s" / "c.log", "a") as f:
            f.write('{"record":"sample","t":1.0,"da')
        sess = read_session(tmp_path / "s")
        assert sess.truncations == 1
        assert len(sess.trial_records) == 1
        assert sess.channels["c"].samples == [(0.0, {"v": 1})]


class TestManifestExtras:
    def test_extra_records_surface_on_read(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            w.add_manifest_record("trial_matrix", {"objects": ["rect"], "samples_per_config": 15})
            w.write_trial_record(make_record(1))
        sess = read_session(tmp_path / "s")
        assert sess.extras["trial_matrix"] == [{"objects": ["rect"], "samples_per_config": 15}]

    def test_reserved_kinds_rejected(self, tmp_path):
        with SessionWriter(tmp_path / "s", "s") as w:
            with pytest.raises(ValueError):
                w.add_manifest_record("channel", {})

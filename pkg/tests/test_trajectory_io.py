import numpy as np
import pytest

from kfvo.geometry import Rigid3, Trajectory
from kfvo.trajectory_io import (NonMonotonic, ParseError, SequenceManifest, load_manifest,
                                parse_kitti, parse_tum, save_manifest, write_kitti,
                                write_tum)


def random_trajectory(seed, n=25):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        q = rng.normal(size=4)
        entries.append((i * 0.1, Rigid3(q, rng.normal(0, 2, 3))))
    return Trajectory(entries)


def assert_trajectories_close(a, b, atol=1e-9):
    assert len(a) == len(b)
    for (ta, pa), (tb, pb) in zip(a.entries, b.entries):
        assert abs(ta - tb) < atol
        np.testing.assert_allclose(pa.t, pb.t, atol=atol)
        qa = pa.q if np.dot(pa.q, pb.q) >= 0 else -pa.q
        np.testing.assert_allclose(qa, pb.q, atol=atol)


class TestTum:
    def test_single_identity_line(self):
        traj = parse_tum("0.0 0 0 0 0 0 0 1")
        assert len(traj) == 1
        t, pose = traj.entries[0]
        assert t == 0.0
        np.testing.assert_allclose(pose.t, np.zeros(3))
        np.testing.assert_allclose(pose.q, [1, 0, 0, 0])

    def test_comments_and_blank_lines_skipped(self):
        traj = parse_tum("# header\n\n0.0 0 0 0 0 0 0 1\n# trailing\n")
        assert len(traj) == 1

    def test_round_trip(self):
        traj = random_trajectory(0)
        assert_trajectories_close(parse_tum(write_tum(traj)), traj)

    def test_wrong_field_count(self):
        with pytest.raises(ParseError) as e:
            parse_tum("0.0 0 0 0")
        assert e.value.line == 1

    def test_non_numeric_token(self):
        with pytest.raises(ParseError) as e:
            parse_tum("0.0 0 0 0 0 0 0 1\n0.1 0 x 0 0 0 0 1")
        assert e.value.line == 2

    def test_decreasing_timestamp(self):
        with pytest.raises(NonMonotonic) as e:
            parse_tum("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1")
        assert e.value.line == 2

    def test_equal_timestamp_rejected(self):
        with pytest.raises(NonMonotonic):
            parse_tum("1.0 0 0 0 0 0 0 1\n1.0 1 0 0 0 0 0 1")

    def test_quaternion_norm_gate(self):
        # mild rounding noise is renormalized, gross corruption is rejected
        traj = parse_tum("0.0 0 0 0 0 0 0 1.0004")
        assert abs(np.linalg.norm(traj.entries[0][1].q) - 1.0) < 1e-12
        with pytest.raises(ParseError):
            parse_tum("0.0 0 0 0 0 0 0 1.5")

    def test_write_format_is_bit_stable(self):
        traj = Trajectory([(0.0, Rigid3())])
        line = write_tum(traj)
        assert line == "0.000000000 0.000000000 0.000000000 0.000000000 " \
                       "0.000000000 0.000000000 0.000000000 1.000000000\n"
        assert write_tum(traj) == line

    def test_empty_trajectory(self):
        assert write_tum(Trajectory([])) == ""
        assert len(parse_tum("")) == 0


class TestKitti:
    def test_identity_row(self):
        traj = parse_kitti("1 0 0 0 0 1 0 0 0 0 1 0")
        assert len(traj) == 1
        t, pose = traj.entries[0]
        assert t == 0.0
        np.testing.assert_allclose(pose.rotation_matrix(), np.eye(3), atol=1e-12)

    def test_translation_only_row(self):
        traj = parse_kitti("1 0 0 1.5 0 1 0 -2.5 0 0 1 0.25")
        np.testing.assert_allclose(traj.entries[0][1].t, [1.5, -2.5, 0.25])

    def test_timestamps_are_line_indices(self):
        text = "1 0 0 0 0 1 0 0 0 0 1 0\n" * 3
        traj = parse_kitti(text)
        assert [t for t, _ in traj.entries] == [0.0, 1.0, 2.0]

    def test_round_trip(self):
        traj = random_trajectory(1)
        parsed = parse_kitti(write_kitti(traj))
        assert len(parsed) == len(traj)
        for (_, pa), (_, pb) in zip(parsed.entries, traj.entries):
            np.testing.assert_allclose(pa.t, pb.t, atol=1e-9)
            np.testing.assert_allclose(pa.rotation_matrix(), pb.rotation_matrix(),
                                       atol=1e-9)

    def test_wrong_field_count(self):
        with pytest.raises(ParseError) as e:
            parse_kitti("1 0 0 0 0 1 0 0 0 0 1")
        assert e.value.line == 1

    def test_orthonormality_gate(self):
        # slightly noisy rotation accepted and cleaned up
        rng = np.random.default_rng(2)
        m = np.eye(3) + rng.normal(0, 1e-4, (3, 3))
        row = np.hstack([m, np.zeros((3, 1))]).reshape(-1)
        traj = parse_kitti(" ".join(f"{v:.12f}" for v in row))
        r = traj.entries[0][1].rotation_matrix()
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        # badly corrupted rotation rejected
        with pytest.raises(ParseError):
            parse_kitti("1 0.5 0 0 0 1 0 0 0 0 1 0")

    def test_matrix_to_quaternion_oracle(self):
        from scipy.spatial.transform import Rotation as ScipyRotation
        rng = np.random.default_rng(3)
        m = ScipyRotation.random(rng=rng).as_matrix()
        row = np.hstack([m, np.array([[0.1], [0.2], [0.3]])]).reshape(-1)
        traj = parse_kitti(" ".join(f"{v:.15f}" for v in row))
        np.testing.assert_allclose(traj.entries[0][1].rotation_matrix(), m, atol=1e-9)


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = SequenceManifest("seq01", ["a.png", "b.png"], "gt.tum", "tum")
        path = tmp_path / "manifest.json"
        save_manifest(path, manifest)
        loaded = load_manifest(path)
        assert loaded == manifest

    def test_rejects_empty_frames(self):
        with pytest.raises(ValueError):
            SequenceManifest("seq", [])

    def test_rejects_duplicate_frames(self):
        with pytest.raises(ValueError):
            SequenceManifest("seq", ["a.png", "a.png"])

    def test_loads_ground_truth(self, tmp_path):
        (tmp_path / "gt.tum").write_text("0.0 0 0 0 0 0 0 1\n")
        manifest = SequenceManifest("seq", ["a.png"], "gt.tum")
        gt = manifest.load_ground_truth(tmp_path)
        assert len(gt) == 1

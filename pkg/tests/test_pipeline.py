import json
import math

import numpy as np
import pytest

from lidarloop import cli
from lidarloop.core_math import InvalidInputError, RigidTransform, random_rotation, se3_exp
from lidarloop.loop_detector import LoopRecord
from lidarloop.pipeline import io, synthetic
from lidarloop.pipeline.config import Config, ConfigError, dump_config, from_mapping, load_config
from lidarloop.pipeline.evaluate import evaluate_dir, loop_scores, revisit_pairs, trajectory_errors
from lidarloop.pipeline.runner import Dataset, load_dataset, run, write_outputs


@pytest.fixture(scope="module")
def corridor():
    w = synthetic.straight_corridor_spec(length=14.0)
    return synthetic.generate_synthetic(w, synthetic.DriftSpec(0.02, 0.05), seed=3)


# -- io ---------------------------------------------------------------------------


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    pts = np.random.default_rng(0).normal(size=(50, 3))
    io.write_ply(tmp_path / "a.ply", pts, binary=binary)
    assert np.array_equal(io.read_ply(tmp_path / "a.ply"), pts)


def test_ply_float_with_extra_properties(tmp_path):
    dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<u1")])
    arr = np.zeros(3, dtype=dt)
    arr["x"], arr["y"], arr["z"], arr["intensity"] = [1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 11, 12]
    head = ("ply\nformat binary_little_endian 1.0\ncomment scanner\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\nproperty uchar intensity\nend_header\n")
    (tmp_path / "b.ply").write_bytes(head.encode() + arr.tobytes())
    assert np.array_equal(io.read_ply(tmp_path / "b.ply"), [[1, 4, 7], [2, 5, 8], [3, 6, 9]])


@pytest.mark.parametrize("content", [b"not a ply\n", b"ply\nformat ascii 1.0\nelement vertex 2\n",
                                     b"ply\nformat binary_big_endian 1.0\nend_header\n",
                                     b"ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n"
                                     b"property float y\nproperty float z\nend_header\n1 2 3\n"])
def test_malformed_ply_raises(tmp_path, content):
    (tmp_path / "bad.ply").write_bytes(content)
    with pytest.raises(io.DatasetIOError, match="bad.ply"):
        io.read_ply(tmp_path / "bad.ply")


def test_xyz_and_tum_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(20, 3))
    io.write_xyz(tmp_path / "p.xyz", pts)
    assert np.array_equal(io.read_xyz(tmp_path / "p.xyz"), pts)
    poses = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(5)]
    io.write_tum(tmp_path / "t.tum", np.arange(5) * 0.1, poses)
    stamps, back = io.read_tum(tmp_path / "t.tum")
    assert np.allclose(stamps, np.arange(5) * 0.1)
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_tum_rejects_short_lines(tmp_path):
    (tmp_path / "t.tum").write_text("0 1 2 3 0 0 0\n")
    with pytest.raises(io.DatasetIOError):
        io.read_tum(tmp_path / "t.tum")


# -- config -----------------------------------------------------------------------


def test_config_defaults():
    c = Config()
    assert c.keyframe_size == 100 and c.cell_size == (1.0, 1.0, 1.0) and c.min_points == 5
    assert (c.plane_thresh, c.line_thresh, c.accept_distance, c.temporal_exclusion) == (0.90, 0.65, 0.1, 5)


@pytest.mark.parametrize("bad", [dict(plane_thresh=0.0), dict(line_thresh=1.5), dict(keyframe_size=0),
                                 dict(cell_size=(1.0, -1.0, 1.0)), dict(cell_size=(1.0, 2.0)),
                                 dict(accept_distance=-0.1), dict(no_such_key=1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        from_mapping(bad)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("keyframe_size = 20\ncell_size = 0.5\n[loop]\nplane_thresh = 0.8\n")
    c = load_config(p, {"line_thresh": 0.5, "min_points": None})
    assert c.keyframe_size == 20 and c.cell_size == (0.5, 0.5, 0.5)
    assert c.plane_thresh == 0.8 and c.line_thresh == 0.5 and c.min_points == 5
    p.write_text(dump_config(c))
    assert load_config(p) == c
    p.write_text("keyframe_size = [")
    with pytest.raises(ConfigError):
        load_config(p)


# -- synthetic data ---------------------------------------------------------------


def test_zero_drift_odometry_is_exact():
    w = synthetic.straight_corridor_spec(length=5.0)
    ds = synthetic.generate_synthetic(w, synthetic.DriftSpec(), seed=0)
    for a, b in zip(ds.odometry, ds.true_poses):
        assert np.array_equal(a.matrix(), b.matrix())


def test_generation_is_deterministic():
    w = synthetic.straight_corridor_spec(length=4.0)
    a = synthetic.generate_synthetic(w, synthetic.DriftSpec(0.02, 0.05), seed=5)
    b = synthetic.generate_synthetic(w, synthetic.DriftSpec(0.02, 0.05), seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert np.array_equal(a.drift_twists, b.drift_twists)


def test_drift_composition_matches_matrix_products():
    rng = np.random.default_rng(2)
    truth = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(8)]
    twists = synthetic.drift_twists(8, synthetic.DriftSpec(0.02, 0.05), rng)
    odom = synthetic.apply_drift(truth, twists)
    m = truth[0].matrix()
    for k in range(1, 8):
        m = m @ np.linalg.inv(truth[k - 1].matrix()) @ truth[k].matrix() @ se3_exp(twists[k]).matrix()
        assert np.allclose(odom[k].matrix(), m, atol=1e-9)
    assert np.allclose(np.linalg.norm(twists[1:, :3], axis=1), 0.02)
    assert np.allclose(np.linalg.norm(twists[1:, 3:], axis=1), math.radians(0.05))


def test_systematic_drift_keeps_its_axis():
    tw = synthetic.drift_twists(6, synthetic.DriftSpec(0.02, 0.05, True, (2, 0, 0), (0, 0, -1)),
                                np.random.default_rng(0))
    assert np.allclose(tw[1:, :3], [0.02, 0, 0])
    assert np.allclose(tw[1:, 3:], [0, 0, -math.radians(0.05)])
    with pytest.raises(InvalidInputError):
        synthetic.drift_twists(3, synthetic.DriftSpec(0.02, 0.0, True, (0, 0, 0)), np.random.default_rng(0))


def test_scan_respects_sensor_range():
    w = synthetic.furnished_room()
    pose = RigidTransform(np.eye(3), np.array([11.0, 7.5, 1.2]))
    pts = synthetic.scan(w, pose, np.random.default_rng(0))
    assert len(pts) > 100
    assert np.max(np.linalg.norm(pts, axis=1)) <= w.sensor.range + 0.1


# -- runner -----------------------------------------------------------------------


def test_no_revisits_leaves_trajectory_untouched(corridor):
    ds = Dataset(corridor.frames, corridor.odometry, corridor.timestamps, corridor.true_poses)
    rep = run(Config(keyframe_size=3), ds)
    assert len(rep.keyframes) == len(ds) // 3
    assert rep.loops == [] and rep.optimizations == []
    for a, b in zip(rep.trajectory_before, rep.trajectory_after):
        assert np.array_equal(a.matrix(), b.matrix())


def test_bad_frames_are_skipped(corridor):
    frames = list(corridor.frames[:6])
    frames[1] = np.vstack([frames[1], [[np.nan, 0, 0], [np.inf, 1, 1]]])
    frames[2] = np.empty((0, 3))
    frames[3] = "garbage"

    def broken():
        raise OSError("unreadable")

    frames[4] = broken
    ds = Dataset(frames, corridor.odometry[:6], corridor.timestamps[:6])
    rep = run(Config(keyframe_size=2), ds)
    assert rep.skipped_frames == 3
    assert rep.skipped_points == 2
    assert rep.registered_frames == [0, 1, 5]


def test_empty_and_inconsistent_datasets():
    with pytest.raises(InvalidInputError):
        run(Config(), Dataset([], [], []))
    with pytest.raises(InvalidInputError):
        Dataset([np.zeros((1, 3))], [], [])
    with pytest.raises(InvalidInputError):
        Dataset([np.zeros((1, 3))] * 2, [RigidTransform.identity()] * 2, [0.0, 0.0])


def test_outputs_and_evaluation(tmp_path, corridor):
    ds = Dataset(corridor.frames, corridor.odometry, corridor.timestamps, corridor.true_poses)
    rep = run(Config(keyframe_size=5), ds)
    out = write_outputs(rep, tmp_path / "out")
    for name in ("trajectory_before.tum", "trajectory_after.tum", "loops.csv", "timing.csv", "keyframes.csv",
                 "graph.g2o", "map_before.ply", "map_after.ply", "config.toml", "histograms/0.csv"):
        assert (out / name).exists(), name
    io.write_tum(tmp_path / "gt.tum", ds.timestamps, corridor.true_poses)
    m = evaluate_dir(out, tmp_path / "gt.tum")
    eb, _ = trajectory_errors(corridor.odometry, corridor.true_poses)
    assert m.endpoint_before == pytest.approx(eb)
    assert m.accepted_loops == 0 and math.isnan(m.precision)


def test_trajectory_errors_anchor_at_first_pose():
    gt = [RigidTransform(np.eye(3), np.array([k, 0.0, 0.0])) for k in range(4)]
    shift = RigidTransform(np.eye(3), np.array([5.0, 5.0, 0.0]))
    est = [shift @ p for p in gt]
    assert trajectory_errors(est, gt) == (0.0, 0.0)
    est[-1] = RigidTransform(np.eye(3), est[-1].translation + [0, 0, 2.0])
    end, rmse = trajectory_errors(est, gt)
    assert end == pytest.approx(2.0) and rmse == pytest.approx(1.0)


def test_loop_scores():
    gt = [RigidTransform(np.eye(3), np.array([x, 0.0, 0.0])) for x in (0, 10, 20, 10, 0.5, 30)]
    first = {k: k for k in range(6)}
    rev = revisit_pairs(first, gt, 1.0, temporal_exclusion=2)
    assert rev == {(3, 1), (4, 0)}
    loops = [LoopRecord(4, 0, 0.95, 0.7, True), LoopRecord(5, 1, 0.92, 0.7, True), LoopRecord(3, 0, 0.9, 0.7, False)]
    precision, recall, n_acc, n_true, n_q = loop_scores(loops, rev)
    assert (precision, recall, n_acc, n_true, n_q) == (0.5, 0.5, 2, 1, 2)


# -- command line -----------------------------------------------------------------


def test_cli_synth_run_eval(tmp_path, capsys):
    spec = tmp_path / "world.toml"
    spec.write_text('world = "straight_corridor"\nformat = "xyz"\n[world_params]\nlength = 6.0\n'
                    '[drift]\ntranslation_rate = 0.02\nrotation_rate_deg = 0.05\n')
    data = tmp_path / "data"
    assert cli.main(["synth", "--spec", str(spec), "--seed", "1", "--out", str(data)]) == 0
    assert len(io.list_frames(data / "frames")) == 7
    out = tmp_path / "run"
    code = cli.main(["run", "--frames", str(data / "frames"), "--trajectory", str(data / "trajectory.tum"),
                     "--ground-truth", str(data / "ground_truth.tum"), "--out", str(out), "--keyframe-size", "3",
                     "--no-write-maps"])
    assert code == 0
    assert not (out / "map_after.ply").exists()
    assert load_config(out / "config.toml").keyframe_size == 3
    capsys.readouterr()
    assert cli.main(["eval", "--report", str(out), "--ground-truth", str(data / "ground_truth.tum")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["accepted_loops"] == 0 and metrics["precision"] is None
    ds = load_dataset(data / "frames", data / "trajectory.tum", data / "ground_truth.tum")
    assert len(ds) == 7 and ds.names[0].endswith(".xyz")


def test_cli_exit_codes(tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    io.write_xyz(frames / "0.xyz", np.zeros((3, 3)))
    io.write_tum(tmp_path / "t.tum", [0.0], [RigidTransform.identity()])
    common = ["--frames", str(frames), "--trajectory", str(tmp_path / "t.tum"), "--out", str(tmp_path / "o")]
    assert cli.main(["run", *common, "--plane-thresh", "1.5"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml"), *common]) == cli.EXIT_CONFIG
    assert cli.main(["run", *common[:2], "--trajectory", str(tmp_path / "none.tum"), *common[4:]]) == cli.EXIT_IO
    io.write_tum(tmp_path / "t.tum", [0.0, 0.1], [RigidTransform.identity()] * 2)
    assert cli.main(["run", *common]) == cli.EXIT_IO  # frame count mismatch
    with pytest.raises(SystemExit):
        cli.main(["run"])


def test_square_loop_drift_gap_matches_twist_composition():
    w = synthetic.square_loop_spec()
    truth = synthetic.trajectory_from_waypoints(w.waypoints, w.step)
    twists = synthetic.drift_twists(len(truth), synthetic.DriftSpec(0.02, 0.0), np.random.default_rng(4))
    odom = synthetic.apply_drift(truth, twists)
    # recompose externally with 4x4 matrices: D_k = D_(k-1) T_(k-1)^-1 T_k exp(twist_k)
    d = truth[0].matrix()
    for k in range(1, len(truth)):
        step = np.eye(4)
        step[:3, 3] = twists[k, :3]  # a pure translation twist exponentiates to itself
        d = d @ np.linalg.inv(truth[k - 1].matrix()) @ truth[k].matrix() @ step
    gap = np.linalg.norm(odom[-1].translation - truth[-1].translation)
    assert np.allclose(odom[-1].matrix(), d, atol=1e-9)
    assert gap == pytest.approx(np.linalg.norm(d[:3, 3] - truth[-1].translation), abs=1e-9)
    assert gap > 0.0


def test_keyframe_never_matches_itself_in_a_run(corridor):
    ds = Dataset(corridor.frames, corridor.odometry, corridor.timestamps)
    rep = run(Config(keyframe_size=2, temporal_exclusion=1, plane_thresh=0.01, line_thresh=0.01), ds)
    assert rep.loops, "permissive thresholds should produce candidates"
    assert all(lp.query_id > lp.match_id for lp in rep.loops)

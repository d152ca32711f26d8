import json

import numpy as np
import pytest
import scipy.io
from scipy.spatial.transform import Rotation

from texalign import io
from texalign.align import assemble_system
from texalign.features import KeypointSet, MatchSet
from texalign.geometry import Intrinsics, Mesh, Pose


def test_read_obj_polygons_and_negative_indices(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("# quad and a triangle\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\n"
                 "vn 0 0 1\nf 1/1/1 2/1/1 3/1/1 4/1/1\nf -4 -2 -1\n")
    m = io.read_obj(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3], [0, 2, 3]]


def test_obj_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = Mesh(rng.normal(size=(10, 3)), [[0, 1, 2], [3, 4, 5], [6, 7, 9]])
    io.write_obj(tmp_path / "a.obj", m)
    back = io.read_obj(tmp_path / "a.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, rtol=1e-8)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_bad_obj_record(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(io.FormatError, match=":2:"):
        io.read_obj(p)


def test_trajectory_round_trip_and_convention(tmp_path):
    R = Rotation.from_rotvec([0.1, -0.4, 0.2]).as_matrix()
    poses = [(3, Pose.from_camera_to_world(R, [1.0, 2.0, 3.0])), (7, Pose.identity())]
    io.write_trajectory(tmp_path / "t.txt", poses)
    back = io.read_trajectory(tmp_path / "t.txt")
    assert [k for k, _ in back] == [3, 7]
    np.testing.assert_allclose(back[0][1].rotation, poses[0][1].rotation, atol=1e-12)
    np.testing.assert_allclose(back[0][1].center, [1, 2, 3], atol=1e-12)
    # the file stores the camera centre as the translation column
    fields = [float(x) for x in (tmp_path / "t.txt").read_text().split()[1:4]]
    np.testing.assert_allclose(fields, [1, 2, 3], atol=1e-12)


@pytest.mark.parametrize("line,msg", [("0 1 2 3 0 0 0\n", "expected 8 fields"),
                                      ("0 1 2 3 0 0 0 x\n", "non-numeric"),
                                      ("0 1 2 3 0 0 0 2\n", "unit length")])
def test_malformed_trajectory_line_numbers(tmp_path, line, msg):
    p = tmp_path / "t.txt"
    p.write_text("# header\n0 0 0 0 0 0 0 1\n" + line)
    with pytest.raises(io.FormatError, match=rf":3: .*{msg}"):
        io.read_trajectory(p)


def test_intrinsics_forms(tmp_path):
    K = Intrinsics(100.0, 110.0, 50.0, 40.0, 100, 80)
    io.write_intrinsics(tmp_path / "k.json", K)
    assert io.read_intrinsics(tmp_path / "k.json") == K
    (tmp_path / "l.json").write_text(json.dumps([K.to_dict(), K.to_dict()]))
    assert io.read_intrinsics(tmp_path / "l.json") == [K, K]
    (tmp_path / "d.json").write_text(json.dumps({"4": K.to_dict()}))
    assert io.read_intrinsics(tmp_path / "d.json") == {4: K}


def _scene_dir(tmp_path, n_poses, n_images):
    K = Intrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
    io.write_intrinsics(tmp_path / "intrinsics.json", K)
    io.write_trajectory(tmp_path / "traj.txt", [(i, Pose.identity()) for i in range(n_poses)])
    (tmp_path / "img").mkdir()
    for i in range(n_images):
        io.write_png(tmp_path / "img" / f"{i:06d}.png", np.full((12, 16, 3), i, np.uint8))
    return tmp_path / "traj.txt", tmp_path / "img", tmp_path / "intrinsics.json"


def test_load_keyframes(tmp_path):
    kfs = io.load_keyframes(*_scene_dir(tmp_path, 3, 3))
    assert [k.id for k in kfs] == [0, 1, 2]
    assert [int(k.image[0, 0, 0]) for k in kfs] == [0, 1, 2]


def test_pose_image_count_mismatch(tmp_path):
    with pytest.raises(io.FormatError, match="5 poses but .* 4 images"):
        io.load_keyframes(*_scene_dir(tmp_path, 5, 4))


def test_png_round_trip_deterministic(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (9, 7, 3)).astype(np.uint8)
    io.write_png(tmp_path / "a.png", img)
    io.write_png(tmp_path / "b.png", img)
    np.testing.assert_array_equal(io.read_png(tmp_path / "a.png"), img)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_system_dump(tmp_path):
    rng = np.random.default_rng(0)
    m = MatchSet(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.ones(4),
                 np.array([[0, 1], [1, 2], [0, 2], [0, 1]]))
    sys = assemble_system(m, [0, 1, 2])
    mtx, rhs = io.write_system(tmp_path / "sys", sys)
    np.testing.assert_array_equal(scipy.io.mmread(str(mtx)).toarray(), sys.A.toarray())
    np.testing.assert_array_equal(np.loadtxt(rhs), sys.b)


def test_keypoint_and_label_dumps(tmp_path):
    ks = KeypointSet(2, np.array([[1.5, 2.5]]), np.zeros((1, 4)), np.array([[0.1, 0.2, 0.3]]),
                     np.array([5]))
    io.write_keypoints(tmp_path / "k.txt", [ks])
    parts = (tmp_path / "k.txt").read_text().split()
    assert parts[0] == "2" and parts[-1] == "5" and len(parts) == 7
    mesh = Mesh(np.eye(3), [[0, 1, 2]])
    io.write_label_ply(tmp_path / "l.ply", mesh, np.array([-1]))
    text = (tmp_path / "l.ply").read_text()
    assert "element face 1" in text and text.strip().endswith("3 0 1 2 0 0 0")

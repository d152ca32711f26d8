import json

import numpy as np
import pytest
from scipy import ndimage

from texalign.align import Solution
from texalign.atlas import Chart, build_charts, export_textured_mesh, pack_charts, render_textured
from texalign.colour import ColourCorrection
from texalign.geometry import Intrinsics, Keyframe, Mesh, project_points
from texalign.io import read_obj, read_obj_uv, read_png
from texalign.pipeline import PipelineConfig, run_pipeline
from texalign.synth import SceneSpec, generate_scene
from texalign.viewselect import Fragment

from conftest import look_down, plane_grid


def _noise_keyframe(pose, K, seed=0):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.uniform(0, 255, (K.height, K.width, 3)), (1.5, 1.5, 0))
    return Keyframe(0, np.clip(np.rint(img), 0, 255).astype(np.uint8), pose, K)


def _plane_fragment():
    K = Intrinsics(150.0, 150.0, 60.0, 50.0, 120, 100)
    mesh = plane_grid(6, 6, size=(0.4, 0.4))
    pose = look_down(0.0, 0.0, 1.0)
    return mesh, _noise_keyframe(pose, K), Fragment(0, 0, np.arange(mesh.n_faces))


def test_zero_correction_chart_is_exact_crop():
    mesh, kf, fr = _plane_fragment()
    (ch,) = build_charts([fr], Solution.zeros(np.array([0])), None, [kf], mesh)
    crop = kf.image[ch.y0:ch.y0 + ch.height, ch.x0:ch.x0 + ch.width]
    np.testing.assert_array_equal(ch.image, crop)
    zc = ColourCorrection.zeros(1, len(mesh.vertices))
    (ch2,) = build_charts([fr], Solution.zeros(np.array([0])), zc, [kf], mesh)
    np.testing.assert_array_equal(ch2.image, crop)


def test_single_face_rectangle_is_padded_bbox():
    mesh, kf, _ = _plane_fragment()
    fr = Fragment(0, 0, np.array([7]))
    (ch,) = build_charts([fr], Solution.zeros(np.array([0])), None, [kf], mesh, pad=2)
    uv, _, _ = project_points(mesh.vertices[mesh.faces[7]], kf.pose, kf.intrinsics)
    assert ch.x0 == int(np.floor(uv[:, 0].min())) - 2
    assert ch.y0 == int(np.floor(uv[:, 1].min())) - 2
    assert ch.x0 + ch.width == int(np.ceil(uv[:, 0].max())) + 2
    assert ch.y0 + ch.height == int(np.ceil(uv[:, 1].max())) + 2
    # chart UVs are the projections relative to the rectangle
    np.testing.assert_allclose(ch.uv[0], uv - [ch.x0, ch.y0])


def test_translation_correction_shifts_content():
    mesh, kf, fr = _plane_fragment()
    tx = 0.004  # 0.6 px at f = 150, h = 1
    sol = Solution(np.array([[0, 0, 0, tx, 0, 0.0]]), np.array([0]), 0.0, 0.0)
    (ch,) = build_charts([fr], sol, None, [kf], mesh)
    rr, cc = np.mgrid[0:ch.height, 0:ch.width]
    # content of corrected point P comes from where the keyframe saw P - t
    x = cc + ch.x0 - 150.0 * tx
    y = rr + ch.y0
    img = kf.image.astype(float)
    ref = np.stack([ndimage.map_coordinates(img[..., c], [y, x], order=1, mode="nearest")
                    for c in range(3)], -1)
    assert np.abs(ch.image - ref).max() <= 1.0


def test_pack_single_chart_min_side():
    c = Chart(0, 0, 0, 0, np.zeros((10, 10, 3), np.uint8), np.array([0]), np.zeros((1, 3, 2)))
    at = pack_charts([c], pad=2)
    assert at.side == 16


def test_pack_empty_and_too_big(tmp_path):
    at = pack_charts([], n_faces=3)
    assert at.image.shape[2] == 3 and not at.textured.any()
    mesh = Mesh(np.eye(3), [[0, 1, 2]])
    files = export_textured_mesh(mesh, at, tmp_path / "e.obj")
    assert read_png(files["png"]).shape[2] == 3 and "untextured" in files
    big = Chart(0, 0, 0, 0, np.zeros((20, 5, 3), np.uint8), np.array([0]), np.zeros((1, 3, 2)))
    with pytest.raises(ValueError):
        pack_charts([big], max_side=16)


def test_random_charts_disjoint():
    rng = np.random.default_rng(0)
    charts = []
    for i in range(100):
        h, w = rng.integers(1, 60, 2)
        charts.append(Chart(i, 0, 0, 0, np.full((h, w, 3), i, np.uint8), np.array([i]),
                            np.zeros((1, 3, 2))))
    pad = 2
    at = pack_charts(charts, pad=pad)
    rects = [(at.placements[c.fragment], c.width, c.height) for c in charts]
    for a in range(100):
        (xa, ya), wa, ha = rects[a]
        assert xa + wa <= at.side and ya + ha <= at.side
        for b in range(a + 1, 100):
            (xb, yb), wb, hb = rects[b]
            sep_x = xb >= xa + wa + pad or xa >= xb + wb + pad
            sep_y = yb >= ya + ha + pad or ya >= yb + hb + pad
            assert sep_x or sep_y
    assert at.side & (at.side - 1) == 0
    # deterministic: equal heights ordered by fragment id
    again = pack_charts(list(reversed(charts)), pad=pad)
    assert again.placements == at.placements


def test_face_uvs_inside_own_chart(two_frag_scene):
    sc = two_frag_scene
    res = run_pipeline(sc.mesh, sc.keyframes, PipelineConfig())
    at = res.atlas
    assert at.textured.all()
    for c in at.charts:
        x, y = at.placements[c.fragment]
        uv = at.face_uv[c.faces] * at.side
        assert uv[..., 0].min() >= x and uv[..., 0].max() <= x + c.width
        assert uv[..., 1].min() >= y and uv[..., 1].max() <= y + c.height


def test_export_round_trip(tmp_path, two_frag_scene):
    sc = two_frag_scene
    res = run_pipeline(sc.mesh, sc.keyframes, PipelineConfig())
    files = export_textured_mesh(sc.mesh, res.atlas, tmp_path / "out" / "tex.obj")
    assert files["mtl"].read_text().strip().endswith("map_Kd tex.png")
    m2 = read_obj(files["obj"])
    assert m2.n_faces == sc.mesh.n_faces
    uv = read_obj_uv(files["obj"])
    expect = res.atlas.face_uv.copy()
    expect[..., 1] = 1.0 - expect[..., 1]
    np.testing.assert_array_equal(uv, np.round(expect, 6))
    np.testing.assert_array_equal(read_png(files["png"]), res.atlas.image)


def test_untextured_faces_sidecar(tmp_path):
    mesh, kf, fr = _plane_fragment()
    half = Fragment(0, 0, np.arange(10))
    (ch,) = build_charts([half], Solution.zeros(np.array([0])), None, [kf], mesh)
    at = pack_charts([ch], n_faces=mesh.n_faces)
    files = export_textured_mesh(mesh, at, tmp_path / "t.obj")
    side = json.loads(files["untextured"].read_text())
    assert side["untextured_faces"] == list(range(10, mesh.n_faces))
    faces = [l for l in files["obj"].read_text().splitlines() if l.startswith("f ")]
    assert all("/" in l for l in faces[:10]) and not any("/" in l for l in faces[10:])


def test_export_error_has_path(tmp_path):
    mesh, kf, fr = _plane_fragment()
    (ch,) = build_charts([fr], Solution.zeros(np.array([0])), None, [kf], mesh)
    at = pack_charts([ch], n_faces=mesh.n_faces)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_textured_mesh(mesh, at, blocker / "sub" / "t.obj")


def test_render_reproduces_keyframe():
    spec = SceneSpec(kind="plane", size=(0.6, 0.45), grid=(30, 30), n_keyframes=1,
                     camera_positions=((0.0, 0.0),), width=200, height=160, focal=300.0,
                     camera_height=1.0)
    sc = generate_scene(spec)
    res = run_pipeline(sc.mesh, sc.keyframes, PipelineConfig(), until="atlas")
    kf = sc.keyframes[0]
    out = render_textured(sc.mesh, res.atlas, kf.pose, kf.intrinsics)
    from texalign.raster import rasterize
    cov = rasterize(sc.mesh, kf.pose, kf.intrinsics).face >= 0
    mse = np.mean((out[cov] - kf.image[cov].astype(float)) ** 2)
    psnr = 10 * np.log10(255.0 ** 2 / mse)
    assert psnr >= 35.0

"""Synthetic ground truth: textured height-field scenes, pose corruption, metrics.

Scenes are rendered with the package's own rasteriser, so the only error
sources in a synthetic run are the ones injected here (pose perturbations
and brightness offsets) plus pixel quantisation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .geometry import Intrinsics, Keyframe, Mesh, Pose
from .raster import rasterize

MAX_PERTURB_ANGLE = 0.15


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "heightfield"          # "plane" or "heightfield"
    size: tuple = (2.0, 1.5)           # metres along x and y
    grid: tuple = (100, 100)           # cells; faces = 2 * nx * ny
    amplitude: float = 0.02            # height-field amplitude (m)
    n_keyframes: int = 11
    width: int = 320
    height: int = 240
    focal: float = 500.0
    camera_height: float = 1.5
    texture: str = "noise"             # "noise" or "checker"
    texture_scale: float = 0.02        # noise lattice spacing or checker cell (m)
    camera_positions: tuple | None = None
    toe_in: float = 0.0                # radians each camera tilts towards the scene centre
    seed: int = 0

    @property
    def n_faces(self) -> int:
        return 2 * self.grid[0] * self.grid[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["grid"] = list(self.grid)
        if self.camera_positions is not None:
            d["camera_positions"] = [list(p) for p in self.camera_positions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["size"] = tuple(d["size"])
        d["grid"] = tuple(d["grid"])
        if d.get("camera_positions") is not None:
            d["camera_positions"] = tuple(tuple(p) for p in d["camera_positions"])
        return cls(**d)


def two_fragment_spec(**kw) -> SceneSpec:
    """Small plane seen by two side-by-side cameras; view selection splits it in two.

    Level cameras over a plane project every face to the same area, so the
    cameras are toed in: each then sees its own half larger and the split
    falls at x = 0 instead of wherever pose noise puts it.
    """
    base = dict(kind="plane", size=(1.0, 0.5), grid=(40, 20), n_keyframes=2, width=200,
                height=160, focal=112.0, camera_height=0.4, texture_scale=0.02,
                camera_positions=((-0.3, 0.0), (0.3, 0.0)), toe_in=0.15)
    base.update(kw)
    return SceneSpec(**base)


@dataclass(frozen=True)
class Perturbation:
    rotation: float = 0.0
    translation: float = 0.0
    seed: int = 0
    brightness: tuple | None = None

    def __post_init__(self):
        if not (0 <= self.rotation <= MAX_PERTURB_ANGLE):
            raise ValueError(f"rotation perturbation must lie in [0, {MAX_PERTURB_ANGLE}] rad")
        if self.translation < 0:
            raise ValueError("translation perturbation must be >= 0")


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    mesh: Mesh
    keyframes: list
    texture: "Texture"

    @property
    def poses(self):
        return [kf.pose for kf in self.keyframes]


class Texture:
    """Procedural surface colour as a function of world (x, y)."""

    def __init__(self, kind: str, scale: float, size, seed: int):
        self.kind = kind
        self.scale = float(scale)
        self.size = tuple(size)
        if kind == "noise":
            rng = np.random.default_rng(seed)
            self.octaves = []
            for k, amp in enumerate((60.0, 30.0)):
                step = self.scale / 2 ** k
                nx = int(np.ceil(self.size[0] / step)) + 8
                ny = int(np.ceil(self.size[1] / step)) + 8
                lat = rng.uniform(-1, 1, size=(3, ny, nx))
                coeffs = np.stack([ndimage.spline_filter(c, order=3, mode="mirror") for c in lat])
                self.octaves.append((step, amp, coeffs))
        elif kind == "checker":
            self.colours = np.array([[210.0, 70.0, 60.0], [40.0, 60.0, 190.0]])
        else:
            raise ValueError(f"unknown texture {kind!r}")

    def __call__(self, xy) -> np.ndarray:
        xy = np.reshape(np.asarray(xy, dtype=np.float64), (-1, 2))
        if self.kind == "checker":
            par = (np.floor(xy[:, 0] / self.scale) + np.floor(xy[:, 1] / self.scale)).astype(np.int64) % 2
            return self.colours[par]
        out = np.full((len(xy), 3), 128.0)
        for step, amp, coeffs in self.octaves:
            gx = (xy[:, 0] + self.size[0] / 2) / step + 4
            gy = (xy[:, 1] + self.size[1] / 2) / step + 4
            for c in range(3):
                out[:, c] += amp * ndimage.map_coordinates(coeffs[c], [gy, gx], order=3,
                                                           mode="mirror", prefilter=False)
        return np.clip(out, 0, 255)


def make_mesh(spec: SceneSpec) -> Mesh:
    nx, ny = spec.grid
    sx, sy = spec.size
    xs = np.linspace(-sx / 2, sx / 2, nx + 1)
    ys = np.linspace(-sy / 2, sy / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    if spec.kind == "heightfield":
        Z = spec.amplitude * (np.sin(2 * np.pi * X / sx * 1.5) * np.cos(2 * np.pi * Y / sy))
    elif spec.kind == "plane":
        Z = np.zeros_like(X)
    else:
        raise ValueError(f"unknown scene kind {spec.kind!r}")
    V = np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    F = np.empty((2 * nx * ny, 3), dtype=np.int64)
    F[0::2] = np.stack([a, b, d], 1)
    F[1::2] = np.stack([a, d, c], 1)
    return Mesh(V, F)


def camera_layout(spec: SceneSpec) -> np.ndarray:
    """Camera (x, y) positions: rows spread over the plane, extra cameras on outer rows."""
    if spec.camera_positions is not None:
        return np.asarray(spec.camera_positions, dtype=np.float64).reshape(-1, 2)
    n = spec.n_keyframes
    sx, sy = spec.size
    rows = max(1, int(round(np.sqrt(n * sy / sx))))
    base, extra = divmod(n, rows)
    counts = [base] * rows
    outer = sorted(range(rows), key=lambda r: (-abs(r - (rows - 1) / 2), r))
    for r in outer[:extra]:
        counts[r] += 1
    pos = []
    for r, cnt in enumerate(counts):
        y = -sy / 2 + (r + 0.5) * sy / rows
        for k in range(cnt):
            pos.append((-sx / 2 + (k + 0.5) * sx / cnt, y))
    return np.array(pos)


def look_down_pose(x: float, y: float, height: float, toe_in: float = 0.0) -> Pose:
    # camera x along world x, camera y along world -y, optical axis along world -z
    R_cw = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    r = np.hypot(x, y)
    if toe_in and r > 0:
        # tilt the optical axis towards the origin, about a horizontal axis
        axis = np.array([-y, x, 0.0]) / r
        R_cw = Rotation.from_rotvec(toe_in * axis).as_matrix() @ R_cw
    return Pose.from_camera_to_world(R_cw, [x, y, height])


def render_image(mesh: Mesh, texture: Texture, pose: Pose, K: Intrinsics) -> np.ndarray:
    r = rasterize(mesh, pose, K)
    img = np.zeros((K.height, K.width, 3))
    hit = r.face >= 0
    if hit.any():
        P = np.einsum("nv,nvk->nk", r.bary[hit], mesh.vertices[mesh.faces[r.face[hit]]])
        img[hit] = texture(P[:, :2])
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec = SceneSpec(), check_coverage: bool = True) -> SyntheticScene:
    """Build the mesh, camera rig and ground-truth renders for ``spec``."""
    from .viewselect import INVISIBLE_PENALTY, data_costs

    mesh = make_mesh(spec)
    tex = Texture(spec.texture, spec.texture_scale, spec.size, spec.seed)
    K = Intrinsics(spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0, spec.width, spec.height)
    pos = camera_layout(spec)
    keyframes = []
    for k, (x, y) in enumerate(pos):
        pose = look_down_pose(x, y, spec.camera_height, spec.toe_in)
        keyframes.append(Keyframe(k, render_image(mesh, tex, pose, K), pose, K))
    scene = SyntheticScene(spec, mesh, keyframes, tex)
    if check_coverage:
        rasters = [rasterize(mesh, kf.pose, kf.intrinsics) for kf in keyframes]
        psi = data_costs(mesh, keyframes, rasters)
        bad = np.flatnonzero(np.all(psi >= INVISIBLE_PENALTY, axis=1))
        if len(bad):
            raise ValueError(f"{len(bad)} faces are invisible in every keyframe (first: {bad[0]})")
    return scene


def random_unit_vectors(rng, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def perturb_poses(poses, pert: Perturbation) -> list[Pose]:
    """Corrupt each pose by a random rigid motion of the given magnitudes.

    The rotation acts on the camera orientation about the camera centre (in
    world axes) and the translation moves the centre, so a rotation-only
    perturbation leaves camera centres where they were.
    """
    rng = np.random.default_rng(pert.seed)
    n = len(poses)
    axes = random_unit_vectors(rng, n)
    dirs = random_unit_vectors(rng, n)
    out = []
    for pose, ax, d in zip(poses, axes, dirs):
        R_cw, c = pose.camera_to_world()
        if pert.rotation > 0:
            R_cw = Rotation.from_rotvec(pert.rotation * ax).as_matrix() @ R_cw
        if pert.translation > 0:
            c = c + pert.translation * d
        if pert.rotation == 0 and pert.translation == 0:
            out.append(pose)
        else:
            out.append(Pose.from_camera_to_world(R_cw, c))
    return out


def brighten(image, offset: float) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.int64) + int(round(offset)), 0, 255).astype(np.uint8)


def perturb_scene(scene: SyntheticScene, pert: Perturbation) -> list[Keyframe]:
    """Keyframes with corrupted poses (and optionally brightened images)."""
    poses = perturb_poses(scene.poses, pert)
    out = []
    for k, (kf, pose) in enumerate(zip(scene.keyframes, poses)):
        img = kf.image
        if pert.brightness is not None and pert.brightness[k]:
            img = brighten(img, pert.brightness[k])
        out.append(Keyframe(kf.id, img, pose, kf.intrinsics))
    return out


def rigid_recovery_error(angle: float, n_points: int = 200, seed: int = 0,
                         lambda2: float = 1e-6) -> float:
    """Small-angle error of recovering an exact rigid motion between two fragments.

    Points of fragment j are fragment i's points under a rotation of
    ``angle`` (random axis) and a translation of ``angle`` metres.  The
    solved corrections are then applied as proper rigid motions (rotation
    vector ``omega[:3]``, translation ``omega[3:]``) and the mean remaining
    pair distance is returned.  With matches exact and a vanishing ridge,
    what remains is the error of the linearised model.  A large ``lambda2``
    adds a bias that is first order in ``angle``.
    """
    from .align import assemble_system, solve_corrections
    from .features import MatchSet

    rng = np.random.default_rng(seed)
    Pi = rng.uniform(-0.5, 0.5, size=(n_points, 3)) * [1.0, 1.0, 0.2]
    ax = random_unit_vectors(rng, 1)[0]
    tr = random_unit_vectors(rng, 1)[0] * angle
    Pj = Rotation.from_rotvec(angle * ax).apply(Pi) + tr
    m = MatchSet(Pi, Pj, np.ones(n_points), np.tile([0, 1], (n_points, 1)),
                 np.arange(n_points), np.arange(n_points))
    w = solve_corrections(assemble_system(m, [0, 1]), lambda2).omega
    qi = Rotation.from_rotvec(w[0, :3]).apply(Pi) + w[0, 3:]
    qj = Rotation.from_rotvec(w[1, :3]).apply(Pj) + w[1, 3:]
    return float(np.mean(np.linalg.norm(qi - qj, axis=1)))


@dataclass
class EvalReport:
    """Alignment and seam metrics of one pipeline run.

    These are constructed metrics for synthetic verification: mean and max
    3D distance between matched keypoints before and after correction, and
    RMS seam colour difference before and after colour correction.
    """

    pair_dist_pre_mean: float = 0.0
    pair_dist_pre_max: float = 0.0
    pair_dist_post_mean: float = 0.0
    pair_dist_post_max: float = 0.0
    seam_rms_pre: float = 0.0
    seam_rms_post: float = 0.0
    n_matches: int = 0
    n_fragments: int = 0
    omega_max_norm: float = 0.0
    seed: int = 0
    config_hash: str = ""
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def metrics(self) -> dict:
        d = self.to_dict()
        d.pop("timings")
        return d

    @property
    def alignment_ratio(self) -> float:
        if self.pair_dist_pre_mean == 0:
            return 1.0
        return self.pair_dist_post_mean / self.pair_dist_pre_mean


def evaluate(result, seed: int = 0, config_hash: str = "") -> EvalReport:
    """Metrics from a :class:`~texalign.pipeline.PipelineResult`."""
    from .align import corrected_matches

    m = result.matches
    rep = EvalReport(seed=seed, config_hash=config_hash, timings=dict(result.timings))
    rep.n_fragments = len(result.fragments)
    rep.n_matches = len(m)
    if len(m):
        pre = m.distances()
        qi, qj = corrected_matches(m, result.solution)
        post = np.linalg.norm(qi - qj, axis=1)
        rep.pair_dist_pre_mean = float(pre.mean())
        rep.pair_dist_pre_max = float(pre.max())
        rep.pair_dist_post_mean = float(post.mean())
        rep.pair_dist_post_max = float(post.max())
    if result.solution is not None and len(result.solution.omega):
        rep.omega_max_norm = float(np.linalg.norm(result.solution.omega, axis=1).max())
    if result.seams is not None:
        rep.seam_rms_pre = result.seams.rms()
        rep.seam_rms_post = result.seams.rms(result.colour)
    return rep


def spec_hash(*objs) -> str:
    h = hashlib.sha256()
    for o in objs:
        h.update(json.dumps(o, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)

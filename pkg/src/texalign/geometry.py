"""Meshes, pinhole cameras and the projection helpers shared by every stage.

Conventions used throughout the package:

* poses map world to camera, ``q = R @ p + t``;
* the image plane spans ``[0, width] x [0, height]`` with pixel ``(row, col)``
  centred at ``(col + 0.5, row + 0.5)``;
* empty depth-map pixels hold :data:`SENTINEL` (``+inf``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

SENTINEL = np.inf
MIN_VIS_TOL = 1e-3


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(np.reshape(self.vertices, (-1, 3)), np.float64)
        f = _frozen(np.reshape(self.faces, (-1, 3)), np.int64)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face references the same vertex twice")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bbox_diagonal(self) -> float:
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def edge_lengths(self) -> np.ndarray:
        """Lengths of the unique undirected edges."""
        e = unique_edges(self.faces)
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, np.float64).reshape(3, 3)
        t = _frozen(self.translation, np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_camera_to_world(cls, rotation, center) -> "Pose":
        R = np.asarray(rotation, dtype=np.float64).T
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @classmethod
    def from_quaternion_c2w(cls, quat_xyzw, center) -> "Pose":
        q = np.asarray(quat_xyzw, dtype=np.float64)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion is not unit length (|q|={n})")
        return cls.from_camera_to_world(Rotation.from_quat(q / n).as_matrix(), center)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def camera_to_world(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(R_cw, center)``."""
        return self.rotation.T.copy(), self.center

    def quaternion_c2w(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation.T).as_quat()

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class Keyframe:
    id: int
    image: np.ndarray
    pose: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError("keyframe image must be HxWx3 uint8")
        if img.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"image is {img.shape[1]}x{img.shape[0]} but intrinsics say "
                f"{self.intrinsics.width}x{self.intrinsics.height}")
        object.__setattr__(self, "image", _frozen(img, np.uint8))


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = _frozen(self.depth, np.float64)
        if d.ndim != 2:
            raise ValueError("depth map must be 2-D")
        ok = d[d != SENTINEL]
        if ok.size and (not np.all(np.isfinite(ok)) or ok.min() <= 0):
            raise ValueError("depths must be positive and finite")
        object.__setattr__(self, "depth", d)

    @property
    def shape(self):
        return self.depth.shape

    def exported(self) -> np.ndarray:
        """Copy with the sentinel written as 0, the on-disk convention."""
        d = np.array(self.depth)
        d[~np.isfinite(d)] = 0.0
        return d


def project_points(points, pose: Pose, K: Intrinsics):
    """Vectorised :func:`project`.

    Returns ``(uv, depth, in_view)`` with ``uv`` of shape (n, 2).
    """
    q = pose.transform(np.reshape(points, (-1, 3)))
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * q[:, 0] / z + K.cx
        v = K.fy * q[:, 1] / z + K.cy
    in_view = (z > 0) & (u >= 0) & (u <= K.width) & (v >= 0) & (v <= K.height)
    return np.stack([u, v], axis=1), z, in_view


def project(p, pose: Pose, K: Intrinsics):
    """Project a world point; returns ``(u, v, depth)`` or ``None`` when out of view."""
    uv, z, ok = project_points(p, pose, K)
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def back_project_points(uv, depth, pose: Pose, K: Intrinsics) -> np.ndarray:
    uv = np.reshape(np.asarray(uv, dtype=np.float64), (-1, 2))
    depth = np.reshape(np.asarray(depth, dtype=np.float64), (-1,))
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise ValueError("back-projection needs finite positive depth")
    q = np.stack([(uv[:, 0] - K.cx) * depth / K.fx,
                  (uv[:, 1] - K.cy) * depth / K.fy,
                  depth], axis=1)
    return (q - pose.translation) @ pose.rotation


def back_project(u, v, depth, pose: Pose, K: Intrinsics) -> np.ndarray:
    return back_project_points([[u, v]], [depth], pose, K)[0]


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Sorted unique undirected vertex pairs of a triangle list."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class FaceAdjacency:
    """Face pairs sharing a mesh edge.

    ``pairs[k] = (f, g)`` with ``f < g``; ``edges[k]`` is the shared vertex pair.
    """

    pairs: np.ndarray
    edges: np.ndarray

    def __len__(self):
        return len(self.pairs)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(f), int(g)) for f, g in self.pairs}


def face_adjacency(mesh: Mesh) -> FaceAdjacency:
    F = mesh.faces
    nf = len(F)
    if nf == 0:
        empty = np.zeros((0, 2), np.int64)
        return FaceAdjacency(empty, empty.copy())
    e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    e.sort(axis=1)
    owner = np.tile(np.arange(nf), 3)
    order = np.lexsort((owner, e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    start = np.r_[True, np.any(e[1:] != e[:-1], axis=1)]
    group = np.cumsum(start) - 1
    counts = np.bincount(group)
    first = np.flatnonzero(start)

    pairs, edges = [], []
    # manifold edges are the common case; handle them without a Python loop
    two = np.flatnonzero(counts == 2)
    if len(two):
        f, g = owner[first[two]], owner[first[two] + 1]
        keep = f != g
        pairs.append(np.stack([np.minimum(f, g), np.maximum(f, g)], 1)[keep])
        edges.append(e[first[two]][keep])
    for gi in np.flatnonzero(counts > 2):
        fs = owner[first[gi]:first[gi] + counts[gi]]
        for a in range(len(fs)):
            for b in range(a + 1, len(fs)):
                if fs[a] != fs[b]:
                    pairs.append(np.array([[min(fs[a], fs[b]), max(fs[a], fs[b])]]))
                    edges.append(e[first[gi]][None])
    if not pairs:
        empty = np.zeros((0, 2), np.int64)
        return FaceAdjacency(empty, empty.copy())
    pairs = np.concatenate(pairs).astype(np.int64)
    edges = np.concatenate(edges).astype(np.int64)
    pairs, idx = np.unique(pairs, axis=0, return_index=True)
    return FaceAdjacency(pairs, edges[idx])


def default_visibility_tol(depth, K: Intrinsics):
    """1.5 pixel footprints at ``depth``, never below 1 mm."""
    foot = np.asarray(depth, dtype=np.float64) * np.sqrt(1.0 / K.fx**2 + 1.0 / K.fy**2)
    return np.maximum(1.5 * foot, MIN_VIS_TOL)


def lookup_depth_candidates(dm: DepthMap, uv: np.ndarray) -> np.ndarray:
    """Depths of the 3x3 pixels around the pixel containing each image point, shape (n, 9)."""
    H, W = dm.shape
    x0 = np.floor(uv[:, 0]).astype(np.int64)
    y0 = np.floor(uv[:, 1]).astype(np.int64)
    out = np.empty((len(uv), 9))
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            xi = np.clip(x0 + dx, 0, W - 1)
            yi = np.clip(y0 + dy, 0, H - 1)
            out[:, k] = dm.depth[yi, xi]
            k += 1
    return out


def visible_mask(points, pose: Pose, K: Intrinsics, dm: DepthMap, tol=None) -> np.ndarray:
    """Vectorised :func:`is_visible`.

    A point is visible when it projects into the image and one of the 3x3
    pixels around its projection holds a depth within ``tol`` of the point's
    own depth.  A single pixel is not enough: a vertex on a bottom or right
    silhouette can sit exactly on a row of pixel centres the fill rule leaves
    empty.
    """
    points = np.reshape(points, (-1, 3))
    uv, z, ok = project_points(points, pose, K)
    vis = np.zeros(len(points), dtype=bool)
    if not ok.any():
        return vis
    idx = np.flatnonzero(ok)
    cand = lookup_depth_candidates(dm, uv[idx])
    tol_arr = default_visibility_tol(z[idx], K) if tol is None else np.broadcast_to(tol, idx.shape)
    diff = np.abs(cand - z[idx, None])
    vis[idx] = np.any(diff <= tol_arr[:, None], axis=1)
    return vis


def is_visible(p, kf: Keyframe, dm: DepthMap, tol=None) -> bool:
    return bool(visible_mask(p, kf.pose, kf.intrinsics, dm, tol)[0])

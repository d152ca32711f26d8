"""Keypoints: detection, lifting to the mesh, border-margin selection and matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .geometry import Keyframe, Mesh, back_project_points, visible_mask
from .raster import Raster, surface_depth_at


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "harris"
    max_keypoints: int = 2000
    patch_size: int = 16
    harris_k: float = 0.05
    sigma: float = 1.0
    rel_threshold: float = 0.01
    min_separation: float = 2.0

    def __post_init__(self):
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    uv: np.ndarray
    descriptors: np.ndarray
    response: np.ndarray

    def __len__(self):
        return len(self.uv)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Lifted keypoints of one keyframe (the package's Keypoint3D records)."""

    keyframe: int
    uv: np.ndarray
    descriptors: np.ndarray
    points: np.ndarray
    fragment: np.ndarray
    response: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.uv)


@dataclass(frozen=True, eq=False)
class MarginSet:
    keyframe: int
    index: np.ndarray
    points: np.ndarray
    descriptors: np.ndarray
    border_dist: np.ndarray

    def __len__(self):
        return len(self.index)


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Weighted cross-fragment correspondences ``(P_i, P_j, mu)``."""

    p_i: np.ndarray
    p_j: np.ndarray
    mu: np.ndarray
    fragments: np.ndarray
    index_i: np.ndarray = field(default=None)
    index_j: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.mu)

    @classmethod
    def empty(cls) -> "MatchSet":
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return cls(z3, z3.copy(), np.zeros(0), np.zeros((0, 2), np.int64), zi, zi.copy())

    @classmethod
    def concatenate(cls, parts) -> "MatchSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.p_i for p in parts]),
                   np.concatenate([p.p_j for p in parts]),
                   np.concatenate([p.mu for p in parts]),
                   np.concatenate([p.fragments for p in parts]),
                   np.concatenate([p.index_i for p in parts]),
                   np.concatenate([p.index_j for p in parts]))

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.p_i - self.p_j, axis=1)


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img / 255.0


def sample_patches(gray, uv, size: int) -> np.ndarray:
    """Bilinear ``size x size`` patches centred on each image point, flattened."""
    off = np.arange(size) - (size - 1) / 2.0
    dx, dy = np.meshgrid(off, off)
    xs = uv[:, 0, None] + dx.ravel()[None] - 0.5
    ys = uv[:, 1, None] + dy.ravel()[None] - 0.5
    vals = ndimage.map_coordinates(gray, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    return vals.reshape(len(uv), size * size)


def normalize_patches(p: np.ndarray):
    p = p - p.mean(axis=1, keepdims=True)
    n = np.linalg.norm(p, axis=1)
    ok = n > 1e-8
    out = np.zeros_like(p)
    out[ok] = p[ok] / n[ok, None]
    return out, ok


def harris_response(gray, sigma: float = 1.0, k: float = 0.05) -> np.ndarray:
    ix = ndimage.sobel(gray, axis=1, mode="reflect") / 8.0
    iy = ndimage.sobel(gray, axis=0, mode="reflect") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _subpixel(R, rows, cols):
    H, W = R.shape
    du = np.zeros(len(rows))
    dv = np.zeros(len(rows))
    inner = (cols > 0) & (cols < W - 1)
    r, c = rows[inner], cols[inner]
    den = R[r, c - 1] - 2 * R[r, c] + R[r, c + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        du[inner] = np.where(den < 0, 0.5 * (R[r, c - 1] - R[r, c + 1]) / den, 0.0)
    inner = (rows > 0) & (rows < H - 1)
    r, c = rows[inner], cols[inner]
    den = R[r - 1, c] - 2 * R[r, c] + R[r + 1, c]
    with np.errstate(divide="ignore", invalid="ignore"):
        dv[inner] = np.where(den < 0, 0.5 * (R[r - 1, c] - R[r + 1, c]) / den, 0.0)
    return np.clip(du, -0.5, 0.5), np.clip(dv, -0.5, 0.5)


def _dedup(uv, resp, min_sep: float):
    order = np.lexsort((np.arange(len(resp)), -resp))
    kept = []
    cell = max(min_sep, 1e-9)
    grid: dict[tuple[int, int], list[int]] = {}
    for i in order:
        gx, gy = int(uv[i, 0] // cell), int(uv[i, 1] // cell)
        clash = False
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for j in grid.get((gx + ox, gy + oy), ()):
                    if np.hypot(*(uv[i] - uv[j])) < min_sep:
                        clash = True
                        break
        if not clash:
            kept.append(i)
            grid.setdefault((gx, gy), []).append(i)
    return np.array(kept, dtype=np.int64)


def detect_harris(image, cfg: DetectorConfig, mask=None) -> Keypoints2D:
    """Harris corners; with ``mask`` both peaks and the threshold's reference
    maximum are restricted to the masked pixels."""
    gray = to_gray(image)
    H, W = gray.shape
    R = harris_response(gray, cfg.sigma, cfg.harris_k)
    if mask is not None:
        R = np.where(mask, R, -np.inf)
    rmax = float(R.max()) if R.size else 0.0
    D = cfg.patch_size * cfg.patch_size
    empty = Keypoints2D(np.zeros((0, 2)), np.zeros((0, D)), np.zeros(0))
    if rmax <= 1e-12:
        return empty
    peak = (R == ndimage.maximum_filter(R, size=3, mode="constant", cval=-np.inf))
    peak &= R > cfg.rel_threshold * rmax
    R = np.where(np.isfinite(R), R, 0.0)
    rows, cols = np.nonzero(peak)
    du, dv = _subpixel(R, rows, cols)
    uv = np.stack([cols + 0.5 + du, rows + 0.5 + dv], 1)
    resp = R[rows, cols]
    half = cfg.patch_size / 2.0
    inside = (uv[:, 0] >= half) & (uv[:, 0] <= W - half) & (uv[:, 1] >= half) & (uv[:, 1] <= H - half)
    uv, resp = uv[inside], resp[inside]
    keep = _dedup(uv, resp, cfg.min_separation)
    keep = keep[: cfg.max_keypoints]
    uv, resp = uv[keep], resp[keep]
    desc, ok = normalize_patches(sample_patches(gray, uv, cfg.patch_size))
    return Keypoints2D(uv[ok], desc[ok], resp[ok])


_DETECTORS: dict[str, Callable[..., Keypoints2D]] = {
    "harris": detect_harris,
}


def register_detector(name: str, fn: Callable[..., Keypoints2D]) -> None:
    """Plug in another detector (ORB, SURF, ...) under ``DetectorConfig.kind = name``.

    ``fn(image, cfg, mask=None)`` must accept an optional boolean pixel mask.
    """
    _DETECTORS[name] = fn


def detect_keypoints(image, cfg: DetectorConfig = DetectorConfig(), mask=None) -> Keypoints2D:
    try:
        fn = _DETECTORS[cfg.kind]
    except KeyError:
        raise ValueError(f"unknown detector {cfg.kind!r}") from None
    return fn(image, cfg, mask=mask)


def surface_mask(raster: Raster, border: float) -> np.ndarray:
    """Pixels covered by the rendered mesh and more than ``border`` px from its silhouette.

    Under pose error the image's true silhouette sits a few pixels away from
    the rendered one; corners there are geometry, not texture.
    """
    cov = raster.face >= 0
    if border <= 0:
        return cov
    return ndimage.distance_transform_edt(np.pad(cov, 1))[1:-1, 1:-1] > border


def lift_to_3d(kps: Keypoints2D, kf: Keyframe, raster: Raster, mesh: Mesh,
               face_fragment=None, keyframe_index: int | None = None) -> KeypointSet:
    """Back-project keypoints onto the mesh through the virtual depth map.

    Keypoints over empty pixels are dropped.  ``face_fragment`` (per-face
    fragment id) sets the owning fragment; without it the field is -1.
    """
    depth = surface_depth_at(raster, mesh, kf.pose, kf.intrinsics, kps.uv)
    ok = np.isfinite(depth)
    uv = kps.uv[ok]
    pts = back_project_points(uv, depth[ok], kf.pose, kf.intrinsics) if ok.any() else np.zeros((0, 3))
    frag = np.full(len(uv), -1, dtype=np.int64)
    if face_fragment is not None and len(uv):
        H, W = raster.shape
        col = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, W - 1)
        row = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, H - 1)
        frag = np.asarray(face_fragment)[raster.face[row, col]]
    kid = kf.id if keyframe_index is None else keyframe_index
    return KeypointSet(kid, uv, kps.descriptors[ok], pts, frag, kps.response[ok])


def with_fragments(kps: KeypointSet, raster: Raster, face_fragment) -> KeypointSet:
    """Copy of ``kps`` with owning fragments looked up from ``raster``."""
    H, W = raster.shape
    col = np.clip(np.floor(kps.uv[:, 0]).astype(np.int64), 0, W - 1)
    row = np.clip(np.floor(kps.uv[:, 1]).astype(np.int64), 0, H - 1)
    f = raster.face[row, col]
    frag = np.where(f >= 0, np.asarray(face_fragment)[f], -1)
    return KeypointSet(kps.keyframe, kps.uv, kps.descriptors, kps.points, frag, kps.response)


def segment_distances(points, a, b, chunk: int = 4096) -> np.ndarray:
    """Distance from each point to the nearest of the segments ``a[k] - b[k]``."""
    points = np.reshape(points, (-1, 3))
    out = np.full(len(points), np.inf)
    if len(a) == 0 or len(points) == 0:
        return out
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    L2 = np.where(L2 > 0, L2, 1.0)
    step = max(1, chunk * 64 // max(len(a), 1))
    for s in range(0, len(points), step):
        p = points[s:s + step]
        ap = p[:, None, :] - a[None]
        t = np.clip(np.einsum("nmk,mk->nm", ap, ab) / L2[None], 0.0, 1.0)
        d = ap - t[..., None] * ab[None]
        out[s:s + step] = np.sqrt(np.einsum("nmk,nmk->nm", d, d).min(axis=1))
    return out


def select_margin_keypoints(group, mesh: Mesh, kps_i: KeypointSet, kps_j: KeypointSet,
                            margin: float, view_i: tuple[Keyframe, Raster],
                            view_j: tuple[Keyframe, Raster]) -> tuple[MarginSet, MarginSet]:
    """Keypoints of each side within ``margin`` of the border and visible in the other keyframe.

    ``view_i``/``view_j`` are the ``(keyframe, raster)`` pairs texturing the
    two fragments of ``group``.
    """
    a = mesh.vertices[group.edges[:, 0]]
    b = mesh.vertices[group.edges[:, 1]]

    def pick(kps: KeypointSet, other: tuple[Keyframe, Raster]) -> MarginSet:
        P = kps.points
        cand = np.arange(len(P))
        if len(P) and np.isfinite(margin):
            lo = np.minimum(a, b).min(0) - margin
            hi = np.maximum(a, b).max(0) + margin
            cand = cand[np.all((P >= lo) & (P <= hi), axis=1)]
        d = segment_distances(P[cand], a, b)
        keep = d <= margin
        cand, d = cand[keep], d[keep]
        if len(cand):
            kf, r = other
            vis = visible_mask(P[cand], kf.pose, kf.intrinsics, r.depth_map)
            cand, d = cand[vis], d[vis]
        return MarginSet(kps.keyframe, cand, P[cand], kps.descriptors[cand], d)

    return pick(kps_i, view_j), pick(kps_j, view_i)


def match_weight(border_dist, sigma: float) -> np.ndarray:
    """Correspondence weight, 1 on the border and decaying as exp(-d / sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return np.maximum(np.exp(-np.asarray(border_dist, dtype=np.float64) / sigma),
                      np.finfo(float).tiny)


def _two_nearest(D):
    n, m = D.shape
    if m == 1:
        return np.zeros(n, dtype=np.int64), D[:, 0], np.full(n, np.inf)
    order = np.argsort(D, axis=1, kind="stable")[:, :2]
    r = np.arange(n)
    return order[:, 0], D[r, order[:, 0]], D[r, order[:, 1]]


def match_keypoints(set_i: MarginSet, set_j: MarginSet, max_3d_dist: float,
                    ratio: float = 0.8, sigma: float = 1.0,
                    pair: tuple[int, int] = (0, 1),
                    max_desc_dist: float | None = None) -> MatchSet:
    """Mutual nearest neighbours in descriptor space passing ratio test and 3D gate.

    The ratio test is applied from both sides so the result does not depend
    on argument order.  ``max_desc_dist`` optionally bounds the descriptor
    distance itself; margins hold few candidates, so a distinctive but wrong
    neighbour can pass the ratio test.
    """
    if len(set_i) == 0 or len(set_j) == 0:
        return MatchSet.empty()
    D = cdist(set_i.descriptors, set_j.descriptors)
    bi, d1i, d2i = _two_nearest(D)
    bj, d1j, d2j = _two_nearest(D.T)
    ii = np.arange(len(set_i))
    jj = bi
    ok = bj[jj] == ii
    ok &= d1i < ratio * d2i
    ok &= d1j[jj] < ratio * d2j[jj]
    if max_desc_dist is not None:
        ok &= d1i <= max_desc_dist
    ii, jj = ii[ok], jj[ok]
    Pi, Pj = set_i.points[ii], set_j.points[jj]
    gate = np.linalg.norm(Pi - Pj, axis=1) <= max_3d_dist
    ii, jj, Pi, Pj = ii[gate], jj[gate], Pi[gate], Pj[gate]
    d = np.minimum(set_i.border_dist[ii], set_j.border_dist[jj])
    mu = match_weight(d, sigma)
    frag = np.tile(np.asarray(pair, dtype=np.int64), (len(ii), 1))
    return MatchSet(Pi, Pj, mu, frag, set_i.index[ii], set_j.index[jj])

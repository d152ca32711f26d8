"""Seam-levelling colour correction.

Each keyframe carries an additive RGB offset per mesh vertex, linearly
interpolated inside faces.  Offsets are found by sparse least squares that
equalises the two keyframes' colours at sample points along fragment
borders while keeping each keyframe's offset field smooth over the mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .align import Solution, source_points
from .geometry import Mesh, project_points, visible_mask


@dataclass(frozen=True, eq=False)
class SeamSamples:
    """Colour pairs sampled along fragment borders.

    ``edge[k]`` is the mesh edge carrying sample k at parameter ``t[k]``;
    ``keyframes[k]`` the keyframe indices texturing the two fragments.
    """

    points: np.ndarray
    c_i: np.ndarray
    c_j: np.ndarray
    fragments: np.ndarray
    keyframes: np.ndarray
    edge: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.points)

    def rms(self, correction: "ColourCorrection | None" = None) -> float:
        """Root mean square of the per-sample RGB difference norm."""
        if len(self) == 0:
            return 0.0
        d = self.c_i - self.c_j
        if correction is not None:
            gi = correction.edge_offsets(self.keyframes[:, 0], self.edge, self.t)
            gj = correction.edge_offsets(self.keyframes[:, 1], self.edge, self.t)
            d = d + gi - gj
        return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


@dataclass(frozen=True, eq=False)
class ColourCorrection:
    offsets: np.ndarray  # (n_keyframes, n_vertices, 3)

    @classmethod
    def zeros(cls, n_keyframes: int, n_vertices: int) -> "ColourCorrection":
        return cls(np.zeros((n_keyframes, n_vertices, 3)))

    def edge_offsets(self, kf, edge, t) -> np.ndarray:
        g = self.offsets
        return (1 - t)[:, None] * g[kf, edge[:, 0]] + t[:, None] * g[kf, edge[:, 1]]

    def face_offsets(self, kf: int, mesh: Mesh, faces, bary) -> np.ndarray:
        """Barycentric mix of vertex offsets, ``faces`` (n,) and ``bary`` (n, 3)."""
        g = self.offsets[kf][mesh.faces[faces]]  # (n, 3 verts, 3 ch)
        return np.einsum("nv,nvc->nc", bary, g)


def sample_image(image, uv) -> np.ndarray:
    """Bilinear RGB lookup at continuous pixel coordinates (n, 2)."""
    img = np.asarray(image, dtype=np.float64)
    uv = np.reshape(uv, (-1, 2))
    coords = [uv[:, 1] - 0.5, uv[:, 0] - 0.5]
    return np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=1)


def sample_seams(groups, fragments, sol: Solution, keyframes, rasters, mesh: Mesh,
                 step: float) -> SeamSamples:
    """Sample both keyframes' colours along every border edge.

    An edge of length L gets ``ceil(L / step) + 1`` evenly spaced samples.  A
    sample is kept when its surface point is visible in both keyframes.
    Each keyframe's colour is read where it saw the content that its
    fragment's correction moves onto the sample point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    label = {fr.id: fr.label for fr in fragments}
    pts, ci, cj, frs, kfs, eds, ts = [], [], [], [], [], [], []
    for g in groups:
        fi, fj = g.pair
        ki, kj = label[fi], label[fj]
        a = mesh.vertices[g.edges[:, 0]]
        b = mesh.vertices[g.edges[:, 1]]
        L = np.linalg.norm(b - a, axis=1)
        n = np.maximum(np.ceil(L / step).astype(np.int64), 1)
        e_idx = np.repeat(np.arange(len(L)), n + 1)
        t = np.concatenate([np.arange(k + 1) / k for k in n])
        P = a[e_idx] + t[:, None] * (b - a)[e_idx]
        vis = np.ones(len(P), dtype=bool)
        for k in (ki, kj):
            kf = keyframes[k]
            vis &= visible_mask(P, kf.pose, kf.intrinsics, rasters[k].depth_map)
        P, t, e_idx = P[vis], t[vis], e_idx[vis]
        if len(P) == 0:
            continue
        cols = []
        for f, k in ((fi, ki), (fj, kj)):
            kf = keyframes[k]
            uv, _, _ = project_points(source_points(P, f, sol), kf.pose, kf.intrinsics)
            cols.append(sample_image(kf.image, uv))
        pts.append(P)
        ci.append(cols[0])
        cj.append(cols[1])
        frs.append(np.tile([fi, fj], (len(P), 1)))
        kfs.append(np.tile([ki, kj], (len(P), 1)))
        eds.append(g.edges[e_idx])
        ts.append(t)
    if not pts:
        z3 = np.zeros((0, 3))
        z2 = np.zeros((0, 2), np.int64)
        return SeamSamples(z3, z3.copy(), z3.copy(), z2, z2.copy(), z2.copy(), np.zeros(0))
    return SeamSamples(np.concatenate(pts), np.concatenate(ci), np.concatenate(cj),
                       np.concatenate(frs).astype(np.int64), np.concatenate(kfs).astype(np.int64),
                       np.concatenate(eds).astype(np.int64), np.concatenate(ts))


def keyframe_edges(mesh: Mesh, fragments) -> list[tuple[int, np.ndarray]]:
    """Unique mesh edges of the faces textured by each keyframe."""
    by_kf: dict[int, list[np.ndarray]] = {}
    for fr in fragments:
        by_kf.setdefault(fr.label, []).append(fr.faces)
    out = []
    for k in sorted(by_kf):
        F = mesh.faces[np.concatenate(by_kf[k])]
        e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
        e.sort(axis=1)
        out.append((k, np.unique(e, axis=0)))
    return out


def default_smooth_weight(samples: SeamSamples, mesh: Mesh, fragments) -> float:
    n_edges = sum(len(e) for _, e in keyframe_edges(mesh, fragments))
    return 0.1 * len(samples) / max(n_edges, 1)


def solve_colour(samples: SeamSamples, mesh: Mesh, fragments, smooth_weight: float | None = None,
                 n_keyframes: int | None = None) -> ColourCorrection:
    """Per-keyframe, per-vertex additive offsets levelling the seams.

    Minimises, per channel,
    ``sum_s (g_i(s) + c_i - g_j(s) - c_j)^2 + w * sum_edges (g(u) - g(v))^2``.
    The unknowns are the vertices of faces each keyframe textures.  Every
    connected block of unknowns has its mean pinned to zero (the system only
    sees differences), which makes the solution the minimum-norm minimiser.
    """
    if n_keyframes is None:
        n_keyframes = max([fr.label for fr in fragments], default=-1) + 1
    nv = len(mesh.vertices)
    corr = ColourCorrection.zeros(n_keyframes, nv)
    if len(samples) == 0:
        return corr
    if smooth_weight is None:
        smooth_weight = default_smooth_weight(samples, mesh, fragments)
    if smooth_weight < 0:
        raise ValueError("smooth_weight must be >= 0")

    kedges = keyframe_edges(mesh, fragments)
    # unknown index per (keyframe, vertex)
    var = {}
    for k, e in kedges:
        for v in np.unique(e):
            var[(k, int(v))] = len(var)
    n = len(var)
    keys = np.array(list(var.keys()), dtype=np.int64).reshape(-1, 2)
    lookup = np.full((n_keyframes, nv), -1, dtype=np.int64)
    lookup[keys[:, 0], keys[:, 1]] = np.arange(n)
    for s in (0, 1):
        if np.any(lookup[samples.keyframes[:, s][:, None], samples.edge] < 0):
            raise ValueError("seam sample on an edge its keyframe does not texture")

    # data rows: (1-t) g[ki,a] + t g[ki,b] - (1-t) g[kj,a] - t g[kj,b] = c_j - c_i
    S = len(samples)
    t = samples.t
    ea, eb = samples.edge[:, 0], samples.edge[:, 1]
    ki, kj = samples.keyframes[:, 0], samples.keyframes[:, 1]
    rows = np.repeat(np.arange(S), 4)
    cols = np.stack([lookup[ki, ea], lookup[ki, eb], lookup[kj, ea], lookup[kj, eb]], 1).ravel()
    vals = np.stack([1 - t, t, -(1 - t), -t], 1).ravel()
    J = sp.csr_matrix((vals, (rows, cols)), shape=(S, n))
    rhs = samples.c_j - samples.c_i

    er, ec = [], []
    for k, e in kedges:
        er.append(lookup[k, e[:, 0]])
        ec.append(lookup[k, e[:, 1]])
    er = np.concatenate(er) if er else np.zeros(0, np.int64)
    ec = np.concatenate(ec) if ec else np.zeros(0, np.int64)
    m = len(er)
    D = sp.csr_matrix((np.r_[np.ones(m), -np.ones(m)], (np.r_[np.arange(m), np.arange(m)],
                                                         np.r_[er, ec])), shape=(m, n))
    M = (J.T @ J + smooth_weight * (D.T @ D)).tocsr()

    # one zero-mean constraint per connected block of unknowns
    nc, comp = connected_components(abs(M) + sp.identity(n), directed=False)
    C = sp.csr_matrix((np.ones(n), (comp, np.arange(n))), shape=(nc, n))
    KKT = sp.bmat([[M, C.T], [C, None]], format="csc")
    b = np.vstack([J.T @ rhs, np.zeros((nc, 3))])
    x = splu(KKT, permc_spec="MMD_AT_PLUS_A").solve(b)[:n]
    corr.offsets[keys[:, 0], keys[:, 1]] = x
    return corr


def colour_objective(samples: SeamSamples, mesh: Mesh, fragments, corr: ColourCorrection,
                     smooth_weight: float) -> float:
    d = samples.c_i - samples.c_j
    d = d + corr.edge_offsets(samples.keyframes[:, 0], samples.edge, samples.t) \
          - corr.edge_offsets(samples.keyframes[:, 1], samples.edge, samples.t)
    total = float(np.sum(d * d))
    for k, e in keyframe_edges(mesh, fragments):
        g = corr.offsets[k]
        total += smooth_weight * float(np.sum((g[e[:, 0]] - g[e[:, 1]]) ** 2))
    return total


def apply_colour(colour, offset) -> np.ndarray:
    """Add an offset and clamp to the 8-bit range."""
    return np.clip(np.asarray(colour, dtype=np.float64) + np.asarray(offset, dtype=np.float64), 0, 255)

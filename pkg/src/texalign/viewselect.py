"""Per-face keyframe selection with a Potts MRF, and fragment decomposition.

The labeling energy is

    E(l) = sum_f psi_f(l_f) + lambda1 * #{(f, g) adjacent : l_f != l_g}

with psi the negated projected area of face f in keyframe l_f.  It is
minimised with alpha-expansion; each expansion move is a single s-t min cut.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import maxflow
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import FaceAdjacency, Keyframe, Mesh, project_points, visible_mask
from .raster import Raster

log = logging.getLogger(__name__)

UNLABELED = -1
INVISIBLE_PENALTY = 1e9


@dataclass(frozen=True)
class EnergyParams:
    lambda1: float = 1.0
    invisible_penalty: float = INVISIBLE_PENALTY
    max_sweeps: int = 10

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")
        if not (self.invisible_penalty > 0 and np.isfinite(self.invisible_penalty)):
            raise ValueError("invisible_penalty must be positive and finite")


@dataclass(frozen=True, eq=False)
class Fragment:
    id: int
    label: int
    faces: np.ndarray


@dataclass(frozen=True, eq=False)
class BorderGroup:
    """All border edges between fragments ``pair[0] < pair[1]``.

    ``edges[k]`` is the shared vertex pair, ``faces[k] = (f, g)`` with f in
    the first fragment and g in the second.
    """

    pair: tuple[int, int]
    edges: np.ndarray
    faces: np.ndarray

    def __len__(self):
        return len(self.edges)


def projected_areas(mesh: Mesh, kf: Keyframe):
    """Pixel area of each face's projection and a per-face in-front flag."""
    uv, z, _ = project_points(mesh.vertices, kf.pose, kf.intrinsics)
    T = uv[mesh.faces]
    a = 0.5 * np.abs((T[:, 1, 0] - T[:, 0, 0]) * (T[:, 2, 1] - T[:, 0, 1])
                     - (T[:, 1, 1] - T[:, 0, 1]) * (T[:, 2, 0] - T[:, 0, 0]))
    front = np.all(z[mesh.faces] > 0, axis=1)
    a = np.where(front & np.isfinite(a), a, 0.0)
    return a, front


def face_visibility(mesh: Mesh, kf: Keyframe, raster: Raster, tol=None) -> np.ndarray:
    """True for faces whose three vertices all pass the depth test."""
    vv = visible_mask(mesh.vertices, kf.pose, kf.intrinsics, raster.depth_map, tol)
    return np.all(vv[mesh.faces], axis=1)


def data_term(face: int, kf: Keyframe, raster: Raster, mesh: Mesh,
              params: EnergyParams = EnergyParams(), scale: float = 1.0) -> float:
    """Cost of texturing ``face`` from ``kf``: minus its projected pixel area / scale."""
    sub = Mesh(mesh.vertices, mesh.faces[face:face + 1])
    area, front = projected_areas(sub, kf)
    if not front[0]:
        return params.invisible_penalty
    vv = visible_mask(mesh.vertices[mesh.faces[face]], kf.pose, kf.intrinsics, raster.depth_map)
    if not vv.all():
        return params.invisible_penalty
    return -float(area[0]) / scale


def data_costs(mesh: Mesh, keyframes, rasters, params: EnergyParams = EnergyParams(),
               normalize: bool = True) -> np.ndarray:
    """The psi table, shape (n_faces, n_keyframes).

    Areas are divided by the median visible projected area so that lambda1
    is independent of image resolution and scene scale.
    """
    nf, nk = mesh.n_faces, len(keyframes)
    areas = np.zeros((nf, nk))
    vis = np.zeros((nf, nk), dtype=bool)
    for k, (kf, r) in enumerate(zip(keyframes, rasters)):
        a, front = projected_areas(mesh, kf)
        areas[:, k] = a
        vis[:, k] = front & face_visibility(mesh, kf, r)
    scale = 1.0
    if normalize:
        good = areas[vis & (areas > 0)]
        if good.size:
            scale = float(np.median(good))
    psi = -areas / scale
    psi[~vis] = params.invisible_penalty
    return psi


def energy(labels, params: EnergyParams, psi, adj: FaceAdjacency) -> float:
    labels = np.asarray(labels)
    lab = labels != UNLABELED
    data = float(psi[np.flatnonzero(lab), labels[lab]].sum())
    if len(adj) == 0:
        return data
    f, g = adj.pairs[:, 0], adj.pairs[:, 1]
    both = lab[f] & lab[g]
    cut = int(np.count_nonzero(labels[f][both] != labels[g][both]))
    return data + params.lambda1 * cut


def _cut(unary0, unary1, ef, eg, w_fg):
    """Solve min sum_f U_f(x_f) + sum_e w_e [x_f = 0, x_g = 1] exactly.

    Returns a boolean array, True where x = 1.
    """
    n = len(unary0)
    g = maxflow.GraphFloat(n, len(ef))
    nodes = g.add_nodes(n)
    c = unary1 - unary0
    g.add_grid_tedges(nodes, np.maximum(c, 0.0), np.maximum(-c, 0.0))
    keep = w_fg > 0
    if keep.any():
        g.add_edges(ef[keep], eg[keep], w_fg[keep], np.zeros(int(keep.sum())))
    g.maxflow()
    return np.asarray(g.get_grid_segments(nodes), dtype=bool)


def _binary_optimum(psi, a, b, ef, eg, lam):
    """Exact two-label Potts optimum (label a at x=0, b at x=1)."""
    u0 = psi[:, a].copy()
    u1 = psi[:, b].copy()
    # [x_f != x_g] = [x_f=0,x_g=1] + [x_f=1,x_g=0]; split into two directed arcs
    ff = np.concatenate([ef, eg])
    gg = np.concatenate([eg, ef])
    w = np.full(len(ff), lam)
    x = _cut(u0, u1, ff, gg, w)
    return np.where(x, b, a)


def _expansion(psi, cur, alpha, ef, eg, lam):
    """Optimal alpha-expansion move from ``cur`` (Kolmogorov-Zabih construction)."""
    n = len(cur)
    u0 = psi[np.arange(n), cur].copy()
    u1 = psi[:, alpha].copy()
    lf, lg = cur[ef], cur[eg]
    A = lam * (lf != lg)
    B = lam * (lf != alpha)
    C = lam * (alpha != lg)
    # E(xf, xg) = A + (C - A) xf + (0 - C) xg + (B + C - A)(1 - xf) xg
    np.add.at(u1, ef, C - A)
    np.add.at(u1, eg, -C)
    x = _cut(u0, u1, ef, eg, B + C - A)
    return np.where(x, alpha, cur)


def solve_labeling(psi, adj: FaceAdjacency, params: EnergyParams = EnergyParams()) -> np.ndarray:
    """Minimise the Potts labeling energy.

    Faces invisible in every keyframe come back as :data:`UNLABELED` and take
    no part in the smoothness term.  With two labels the problem is solved
    exactly by one cut; otherwise alpha-expansion sweeps labels in ascending
    order, accepting a move only when it strictly lowers the energy.
    """
    psi = np.asarray(psi, dtype=np.float64)
    nf, nl = psi.shape
    if nl < 1:
        raise ValueError("need at least one label")
    labels = np.full(nf, UNLABELED, dtype=np.int64)
    active = ~np.all(psi >= params.invisible_penalty, axis=1)
    if not active.any():
        return labels
    idx = np.flatnonzero(active)
    remap = np.full(nf, -1, dtype=np.int64)
    remap[idx] = np.arange(len(idx))
    sub = psi[idx]
    if len(adj):
        pf, pg = remap[adj.pairs[:, 0]], remap[adj.pairs[:, 1]]
        both = (pf >= 0) & (pg >= 0)
        ef, eg = pf[both], pg[both]
    else:
        ef = eg = np.zeros(0, dtype=np.int64)
    lam = float(params.lambda1)
    sub_adj = FaceAdjacency(np.stack([ef, eg], 1), np.zeros((len(ef), 2), np.int64))

    cur = np.argmin(sub, axis=1)
    if nl == 1 or lam == 0 or len(ef) == 0:
        labels[idx] = cur
        return labels
    E = energy(cur, params, sub, sub_adj)
    if nl == 2:
        cand = _binary_optimum(sub, 0, 1, ef, eg, lam)
        if energy(cand, params, sub, sub_adj) < E:
            cur = cand
        labels[idx] = cur
        return labels

    eps = 1e-12 * max(1.0, abs(E))
    for sweep in range(params.max_sweeps):
        improved = False
        for alpha in range(nl):
            cand = _expansion(sub, cur, alpha, ef, eg, lam)
            Ec = energy(cand, params, sub, sub_adj)
            if Ec < E - eps:
                cur, E, improved = cand, Ec, True
        log.debug("sweep %d energy %.6g", sweep, E)
        if not improved:
            break
    labels[idx] = cur
    return labels


def extract_fragments(labels, adj: FaceAdjacency) -> list[Fragment]:
    """Connected components of equal-label faces, ids ordered by smallest face."""
    labels = np.asarray(labels)
    nf = len(labels)
    lab = np.flatnonzero(labels != UNLABELED)
    if len(lab) == 0:
        return []
    if len(adj):
        f, g = adj.pairs[:, 0], adj.pairs[:, 1]
        same = (labels[f] == labels[g]) & (labels[f] != UNLABELED)
        f, g = f[same], g[same]
    else:
        f = g = np.zeros(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(f)), (f, g)), shape=(nf, nf))
    _, comp = connected_components(graph, directed=False)
    comp = comp[lab]
    # first occurrence in ascending face order gives the smallest face per component
    uniq, first = np.unique(comp, return_index=True)
    order = np.argsort(lab[first])
    out = []
    for new_id, ci in enumerate(uniq[order]):
        faces = lab[comp == ci]
        out.append(Fragment(new_id, int(labels[faces[0]]), faces))
    return out


def face_fragment_map(fragments, n_faces: int) -> np.ndarray:
    """Per-face fragment id, -1 for unlabeled faces."""
    m = np.full(n_faces, -1, dtype=np.int64)
    for fr in fragments:
        m[fr.faces] = fr.id
    return m


def fragment_borders(fragments, adj: FaceAdjacency, mesh: Mesh | None = None) -> list[BorderGroup]:
    nf = mesh.n_faces if mesh is not None else (int(adj.pairs.max()) + 1 if len(adj) else 0)
    fmap = face_fragment_map(fragments, nf)
    if len(adj) == 0:
        return []
    f, g = adj.pairs[:, 0], adj.pairs[:, 1]
    a, b = fmap[f], fmap[g]
    cross = (a >= 0) & (b >= 0) & (a != b)
    f, g, a, b, e = f[cross], g[cross], a[cross], b[cross], adj.edges[cross]
    swap = a > b
    f, g = np.where(swap, g, f), np.where(swap, f, g)
    a, b = np.minimum(a, b), np.maximum(a, b)
    order = np.lexsort((g, f, b, a))
    f, g, a, b, e = f[order], g[order], a[order], b[order], e[order]
    groups = []
    if len(a) == 0:
        return groups
    brk = np.flatnonzero(np.r_[True, (a[1:] != a[:-1]) | (b[1:] != b[:-1]), True])
    for s, t in zip(brk[:-1], brk[1:]):
        groups.append(BorderGroup((int(a[s]), int(b[s])), e[s:t], np.stack([f[s:t], g[s:t]], 1)))
    return groups

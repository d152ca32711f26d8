"""Vectorised z-buffer rasterisation of triangle meshes.

Triangles are scan-converted by enumerating the pixel centres inside each
triangle's bounding box, so the cost is proportional to the summed box area
rather than to a per-triangle Python loop.  Coverage uses edge functions with
a top-left style tie rule, so a pixel centre lying exactly on an edge shared
by two triangles is owned by exactly one of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SENTINEL, DepthMap, Intrinsics, Mesh, Pose

NEAR = 1e-6
_CHUNK = 1 << 21


@dataclass(frozen=True, eq=False)
class Raster:
    """Per-pixel nearest surface.

    ``face`` is -1 where nothing was hit; ``bary`` holds perspective-correct
    barycentric weights of the hit face (zeros elsewhere).
    """

    depth: np.ndarray
    face: np.ndarray
    bary: np.ndarray

    @property
    def depth_map(self) -> DepthMap:
        return DepthMap(self.depth)

    @property
    def shape(self):
        return self.depth.shape


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_zero(ax, ay, bx, by):
    # exactly one of the directions d and -d passes
    dx, dy = bx - ax, by - ay
    return (dy > 0) | ((dy == 0) & (dx > 0))


def rasterize_screen(xy, z, faces, width: int, height: int):
    """Z-buffer triangles given in pixel coordinates.

    Parameters
    ----------
    xy : (n, 2) vertex positions in pixels.
    z : (n,) positive vertex depths; interpolated perspective-correctly.
    faces : (m, 3) vertex indices.

    Returns
    -------
    depth : (height, width) array, ``inf`` where empty.
    face : (height, width) int array, -1 where empty.
    screen_bary : (height, width, 3) screen-space (affine) barycentrics.
    """
    xy = np.asarray(xy, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    depth = np.full((height, width), SENTINEL)
    face_buf = np.full((height, width), -1, dtype=np.int64)
    sbary = np.zeros((height, width, 3))
    if len(faces) == 0 or width <= 0 or height <= 0:
        return depth, face_buf, sbary

    fz = z[faces]
    ok = np.all(fz > NEAR, axis=1) & np.all(np.isfinite(xy[faces]).reshape(-1, 6), axis=1)
    fidx = np.flatnonzero(ok)
    P = xy[faces[fidx]]  # (m, 3, 2)
    area = _edge(P[:, 0, 0], P[:, 0, 1], P[:, 1, 0], P[:, 1, 1], P[:, 2, 0], P[:, 2, 1])
    nz = area != 0
    fidx, P, area = fidx[nz], P[nz], area[nz]
    # orient every triangle so that its signed area is positive
    flip = area < 0
    P[flip] = P[flip][:, [0, 2, 1]]
    order = np.tile(np.arange(3), (len(fidx), 1))
    order[flip] = [0, 2, 1]
    area = np.abs(area)

    x0 = np.clip(np.ceil(P[:, :, 0].min(1) - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(P[:, :, 0].max(1) - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(P[:, :, 1].min(1) - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(P[:, :, 1].max(1) - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny

    hits_pix, hits_face, hits_z, hits_b = [], [], [], []
    csum = np.cumsum(counts)
    start = 0
    while start < len(fidx):
        # chunk by number of candidate pixels to bound memory
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + _CHUNK, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        start = stop
        c = counts[sl]
        tot = int(c.sum())
        if tot == 0:
            continue
        tri = np.repeat(np.arange(sl.start, sl.stop), c)
        offs = np.arange(tot) - np.repeat(np.cumsum(c) - c, c)
        px = x0[tri] + offs % nx[tri]
        py = y0[tri] + offs // nx[tri]
        cx = px + 0.5
        cy = py + 0.5
        T = P[tri]
        ax, ay = T[:, 0, 0], T[:, 0, 1]
        bx, by = T[:, 1, 0], T[:, 1, 1]
        qx, qy = T[:, 2, 0], T[:, 2, 1]
        w0 = _edge(bx, by, qx, qy, cx, cy)
        w1 = _edge(qx, qy, ax, ay, cx, cy)
        w2 = _edge(ax, ay, bx, by, cx, cy)
        inside = ((w0 > 0) | ((w0 == 0) & _owns_zero(bx, by, qx, qy))) & \
                 ((w1 > 0) | ((w1 == 0) & _owns_zero(qx, qy, ax, ay))) & \
                 ((w2 > 0) | ((w2 == 0) & _owns_zero(ax, ay, bx, by)))
        if not inside.any():
            continue
        tri, px, py = tri[inside], px[inside], py[inside]
        a = area[tri]
        b = np.stack([w0[inside], w1[inside], w2[inside]], 1) / a[:, None]
        # undo the orientation flip so weights follow the original vertex order
        ordr = order[tri]
        bo = np.empty_like(b)
        np.put_along_axis(bo, ordr, b, axis=1)
        fz_t = fz[fidx[tri]]
        invz = np.sum(bo / fz_t, axis=1)
        hits_pix.append(py * width + px)
        hits_face.append(fidx[tri])
        hits_z.append(1.0 / invz)
        hits_b.append(bo)

    if not hits_pix:
        return depth, face_buf, sbary
    pix = np.concatenate(hits_pix)
    hf = np.concatenate(hits_face)
    hz = np.concatenate(hits_z)
    hb = np.concatenate(hits_b)
    srt = np.lexsort((hf, hz, pix))
    pix, hf, hz, hb = pix[srt], hf[srt], hz[srt], hb[srt]
    first = np.r_[True, pix[1:] != pix[:-1]]
    pix, hf, hz, hb = pix[first], hf[first], hz[first], hb[first]
    depth.ravel()[pix] = hz
    face_buf.ravel()[pix] = hf
    sbary.reshape(-1, 3)[pix] = hb
    return depth, face_buf, sbary


def rasterize(mesh: Mesh, pose: Pose, K: Intrinsics) -> Raster:
    """Render depth, face ids and perspective-correct barycentrics."""
    q = pose.transform(mesh.vertices)
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = np.stack([K.fx * q[:, 0] / z + K.cx, K.fy * q[:, 1] / z + K.cy], 1)
    depth, face, sb = rasterize_screen(xy, z, mesh.faces, K.width, K.height)
    hit = face >= 0
    bary = np.zeros_like(sb)
    if hit.any():
        fz = z[mesh.faces[face[hit]]]
        w = sb[hit] / fz
        bary[hit] = w / w.sum(1, keepdims=True)
    return Raster(depth, face, bary)


def rasterize_depth(mesh: Mesh, pose: Pose, K: Intrinsics) -> DepthMap:
    return DepthMap(rasterize(mesh, pose, K).depth)


def surface_depth_at(raster: Raster, mesh: Mesh, pose: Pose, K: Intrinsics, uv) -> np.ndarray:
    """Depth along the viewing ray through sub-pixel ``uv``.

    The pixel containing each point selects a face; the depth is the exact
    ray/plane intersection with that face, so lifted points lie on the mesh
    rather than on the pixel-centre depth.  Empty pixels give ``inf``.
    """
    uv = np.reshape(np.asarray(uv, dtype=np.float64), (-1, 2))
    H, W = raster.shape
    col = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, W - 1)
    row = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, H - 1)
    f = raster.face[row, col]
    out = np.full(len(uv), SENTINEL)
    hit = f >= 0
    if not hit.any():
        return out
    tri = pose.transform(mesh.vertices[mesh.faces[f[hit]]].reshape(-1, 3)).reshape(-1, 3, 3)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    d = np.stack([(uv[hit, 0] - K.cx) / K.fx, (uv[hit, 1] - K.cy) / K.fy,
                  np.ones(hit.sum())], 1)
    num = np.einsum("ij,ij->i", n, tri[:, 0])
    den = np.einsum("ij,ij->i", n, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        zz = num / den
    bad = ~np.isfinite(zz) | (zz <= 0)
    zz[bad] = raster.depth[row[hit], col[hit]][bad]
    out[hit] = zz
    return out

"""Texture atlas construction: per-fragment charts, shelf packing, OBJ export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .align import Solution, source_points
from .colour import ColourCorrection, sample_image
from .geometry import Intrinsics, Mesh, Pose, project_points
from .raster import rasterize, rasterize_screen

log = logging.getLogger(__name__)

MAX_ATLAS_SIDE = 8192


@dataclass(frozen=True, eq=False)
class Chart:
    """Rectangle ``[x0, x0 + w) x [y0, y0 + h)`` of keyframe pixels for one fragment.

    ``uv`` holds per-face, per-corner positions in chart pixels (pixel
    ``(r, c)`` centred at ``(c + 0.5, r + 0.5)``).
    """

    fragment: int
    keyframe: int
    x0: int
    y0: int
    image: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    clamped: bool = False

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True, eq=False)
class Atlas:
    image: np.ndarray
    face_uv: np.ndarray  # (n_faces, 3, 2) in [0, 1], image rows downwards; NaN if untextured
    placements: dict
    charts: tuple

    @property
    def side(self) -> int:
        return self.image.shape[0]

    @property
    def textured(self) -> np.ndarray:
        return ~np.isnan(self.face_uv[:, 0, 0])


def _chart_for(fr, kf, mesh: Mesh, sol: Solution, colour: ColourCorrection | None, pad: int,
               keyframe_index: int) -> Chart:
    K = kf.intrinsics
    verts, inv = np.unique(mesh.faces[fr.faces], return_inverse=True)
    inv = inv.reshape(-1, 3)
    uv, z, _ = project_points(mesh.vertices[verts], kf.pose, K)
    x0 = int(np.floor(uv[:, 0].min())) - pad
    y0 = int(np.floor(uv[:, 1].min())) - pad
    x1 = int(np.ceil(uv[:, 0].max())) + pad
    y1 = int(np.ceil(uv[:, 1].max())) + pad
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, K.width), min(y1, K.height)
    clamped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
    if clamped and (x0 < -pad or y0 < -pad or x1 > K.width + pad or y1 > K.height + pad):
        log.warning("fragment %d leaves keyframe %d; chart clamped", fr.id, kf.id)
    w, h = max(cx1 - cx0, 1), max(cy1 - cy0, 1)
    local = uv - [cx0, cy0]

    _, face_buf, sbary = rasterize_screen(local, z, inv, w, h)
    hit = face_buf >= 0
    rr, cc = np.mgrid[0:h, 0:w]
    base = np.stack([cc + cx0 + 0.5, rr + cy0 + 0.5], -1).astype(np.float64)

    shift = np.zeros((h, w, 2))
    offset = np.zeros((h, w, 3))
    if hit.any():
        fl = face_buf[hit]
        b = sbary[hit]
        P = np.einsum("nv,nvk->nk", b, mesh.vertices[mesh.faces[fr.faces[fl]]])
        if np.any(sol.vector(fr.id) != 0):
            uv_c, _, _ = project_points(source_points(P, fr.id, sol), kf.pose, K)
            uv_0, _, _ = project_points(P, kf.pose, K)
            shift[hit] = uv_c - uv_0
        if colour is not None:
            offset[hit] = colour.face_offsets(keyframe_index, mesh, fr.faces[fl], b)
        if not hit.all():
            # extend displacement and offset from the nearest covered texel
            _, (ir, ic) = ndimage.distance_transform_edt(~hit, return_indices=True)
            shift = shift[ir, ic]
            offset = offset[ir, ic]
    loc = base + shift
    vals = sample_image(kf.image, loc.reshape(-1, 2)).reshape(h, w, 3) + offset
    img = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return Chart(fr.id, keyframe_index, cx0, cy0, img, fr.faces.copy(), local[inv], clamped)


def build_charts(fragments, sol: Solution, colour: ColourCorrection | None, keyframes,
                 mesh: Mesh, pad: int = 2) -> list[Chart]:
    """One chart per fragment, laid out in its keyframe's image plane.

    A texel's content is read from the keyframe at the texel position plus
    the image displacement that the fragment's correction induces at the
    surface point under it, then shifted by the colour offset.  With zero
    correction a chart is an exact crop of its keyframe.
    """
    return [_chart_for(fr, keyframes[fr.label], mesh, sol, colour, pad, fr.label)
            for fr in fragments]


def _next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


def _shelf(charts, side: int, pad: int):
    x = y = shelf = 0
    out = {}
    for c in charts:
        if x + c.width > side:
            y += shelf + pad
            x = shelf = 0
        if c.width > side or y + c.height > side:
            return None
        out[c.fragment] = (x, y)
        x += c.width + pad
        shelf = max(shelf, c.height)
    return out


def pack_charts(charts, pad: int = 2, n_faces: int | None = None,
                max_side: int = MAX_ATLAS_SIDE) -> Atlas:
    """Shelf-pack charts (tallest first) into the smallest power-of-two square."""
    charts = sorted(charts, key=lambda c: (-c.height, c.fragment))
    if n_faces is None:
        n_faces = max((int(c.faces.max()) + 1 for c in charts if len(c.faces)), default=0)
    face_uv = np.full((n_faces, 3, 2), np.nan)
    if not charts:
        return Atlas(np.zeros((1, 1, 3), np.uint8), face_uv, {}, ())
    big = max(max(c.width, c.height) for c in charts)
    if big > max_side:
        raise ValueError(f"chart of size {big} exceeds maximum atlas side {max_side}")
    side = _next_pow2(big)
    while True:
        place = _shelf(charts, side, pad)
        if place is not None:
            break
        side *= 2
        if side > max_side:
            raise ValueError(f"charts do not fit in a {max_side} atlas")
    img = np.zeros((side, side, 3), np.uint8)
    for c in charts:
        x, y = place[c.fragment]
        img[y:y + c.height, x:x + c.width] = c.image
        face_uv[c.faces] = (c.uv + [x, y]) / side
    return Atlas(img, face_uv, place, tuple(charts))


def render_textured(mesh: Mesh, atlas: Atlas, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Render the textured mesh with perspective-correct UVs and bilinear lookup."""
    r = rasterize(mesh, pose, K)
    out = np.zeros((K.height, K.width, 3))
    hit = (r.face >= 0)
    if hit.any():
        f = r.face[hit]
        ok = atlas.textured[f]
        uv = np.einsum("nv,nvk->nk", r.bary[hit][ok], atlas.face_uv[f[ok]]) * atlas.side
        vals = sample_image(atlas.image, uv)
        tmp = np.zeros((hit.sum(), 3))
        tmp[ok] = vals
        out[hit] = tmp
    return out


def export_textured_mesh(mesh: Mesh, atlas: Atlas, path) -> dict:
    """Write ``<stem>.obj``, ``<stem>.mtl`` and ``<stem>.png``.

    Untextured faces are written without texture indices and listed in
    ``<stem>_untextured.json``.
    """
    from .io import write_png

    path = Path(path)
    stem = path.with_suffix("")
    obj, mtl, png = stem.with_suffix(".obj"), stem.with_suffix(".mtl"), stem.with_suffix(".png")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(png, atlas.image)
        mtl.write_text(f"newmtl atlas\nKa 1.000000 1.000000 1.000000\nKd 1.000000 1.000000 1.000000\n"
                       f"Ks 0.000000 0.000000 0.000000\nd 1.0\nillum 1\nmap_Kd {png.name}\n")
        tex = atlas.textured
        lines = [f"mtllib {mtl.name}\n", "usemtl atlas\n"]
        lines += [f"v {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.vertices]
        uv = atlas.face_uv[tex].reshape(-1, 2)
        lines += [f"vt {u:.6f} {1.0 - v:.6f}\n" for u, v in uv]
        t = 1
        for f, (a, b, c) in enumerate(mesh.faces + 1):
            if tex[f]:
                lines.append(f"f {a}/{t} {b}/{t + 1} {c}/{t + 2}\n")
                t += 3
            else:
                lines.append(f"f {a} {b} {c}\n")
        obj.write_text("".join(lines))
        out = {"obj": obj, "mtl": mtl, "png": png}
        if not tex.all():
            side = stem.parent / (stem.name + "_untextured.json")
            side.write_text(json.dumps({"untextured_faces": np.flatnonzero(~tex).tolist()}))
            out["untextured"] = side
    except OSError as e:
        raise OSError(f"failed to export textured mesh to {path}: {e}") from e
    return out

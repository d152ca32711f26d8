"""File formats: OBJ meshes, trajectories, intrinsics, PNG images and debug dumps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.io
from PIL import Image

from .geometry import Intrinsics, Keyframe, Mesh, Pose


class FormatError(ValueError):
    pass


def read_obj(path) -> Mesh:
    """Vertices and faces of a Wavefront OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise FormatError(f"{path}:{ln}: bad vertex record") from None
            elif parts[0] == "f":
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise FormatError(f"{path}:{ln}: bad face record") from None
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_obj_uv(path):
    """Per-face corner texture coordinates of an OBJ, NaN where a face has none."""
    vts, fuv = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "vt":
                vts.append([float(parts[1]), float(parts[2])])
            elif parts[0] == "f":
                refs = [p.split("/") for p in parts[1:]]
                if all(len(r) > 1 and r[1] for r in refs):
                    fuv.append([vts[int(r[1]) - 1] for r in refs[:3]])
                else:
                    fuv.append([[np.nan, np.nan]] * 3)
    return np.array(fuv, dtype=np.float64).reshape(-1, 3, 2)


def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a} {b} {c}\n" for a, b, c in mesh.faces + 1]
    Path(path).write_text("".join(lines))


def read_intrinsics(path):
    """A single intrinsics object, or a list / id-keyed dict of them."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return [Intrinsics.from_dict(d) for d in data]
    if "fx" in data:
        return Intrinsics.from_dict(data)
    return {int(k): Intrinsics.from_dict(v) for k, v in data.items()}


def write_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(json.dumps(K.to_dict(), indent=2) + "\n")


def read_trajectory(path) -> list[tuple[int, Pose]]:
    """``id tx ty tz qx qy qz qw`` lines, camera-to-world; returned world-to-camera."""
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                kid = int(parts[0])
                vals = [float(x) for x in parts[1:]]
            except ValueError:
                raise FormatError(f"{path}:{ln}: non-numeric field") from None
            try:
                pose = Pose.from_quaternion_c2w(vals[3:], vals[:3])
            except ValueError as e:
                raise FormatError(f"{path}:{ln}: {e}") from None
            out.append((kid, pose))
    return out


def write_trajectory(path, items) -> None:
    lines = []
    for kid, pose in items:
        c = pose.center
        q = pose.quaternion_c2w()
        lines.append(f"{kid} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g} "
                     f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}\n")
    Path(path).write_text("".join(lines))


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, image) -> None:
    # fixed encoder settings keep output byte-stable
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG", optimize=False,
                                                          compress_level=6)


def load_keyframes(trajectory_path, images_dir, intrinsics_path) -> list[Keyframe]:
    """Pair trajectory lines with ``<id>.png`` (or the sorted PNG list) in ``images_dir``."""
    traj = read_trajectory(trajectory_path)
    images = sorted(Path(images_dir).glob("*.png"))
    if len(images) != len(traj):
        raise FormatError(f"trajectory has {len(traj)} poses but {images_dir} holds "
                          f"{len(images)} images")
    by_stem = {p.stem: p for p in images}
    Ks = read_intrinsics(intrinsics_path)
    out = []
    for n, (kid, pose) in enumerate(traj):
        p = by_stem.get(f"{kid:06d}") or by_stem.get(str(kid)) or images[n]
        if isinstance(Ks, Intrinsics):
            K = Ks
        elif isinstance(Ks, list):
            K = Ks[n]
        else:
            K = Ks[kid]
        out.append(Keyframe(kid, read_png(p), pose, K))
    return out


def write_label_ply(path, mesh: Mesh, labels) -> None:
    """Mesh with one colour per face label, for eyeballing view selection."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(12345)
    palette = rng.integers(40, 256, size=(max(int(labels.max(initial=0)) + 1, 1), 3))
    lines = ["ply\n", "format ascii 1.0\n", f"element vertex {len(mesh.vertices)}\n",
             "property float x\n", "property float y\n", "property float z\n",
             f"element face {len(mesh.faces)}\n", "property list uchar int vertex_indices\n",
             "property uchar red\n", "property uchar green\n", "property uchar blue\n",
             "end_header\n"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.vertices]
    for (a, b, c), l in zip(mesh.faces, labels):
        r, g, bl = (palette[l] if l >= 0 else (0, 0, 0))
        lines.append(f"3 {a} {b} {c} {r} {g} {bl}\n")
    Path(path).write_text("".join(lines))


def write_keypoints(path, keypoint_sets) -> None:
    """``kf_id u v x y z fragment_id`` per lifted keypoint."""
    lines = []
    for ks in keypoint_sets:
        for (u, v), (x, y, z), f in zip(ks.uv, ks.points, ks.fragment):
            lines.append(f"{ks.keyframe} {u:.6f} {v:.6f} {x:.9g} {y:.9g} {z:.9g} {f}\n")
    Path(path).write_text("".join(lines))


def write_system(prefix, system) -> tuple[Path, Path]:
    """``<prefix>.mtx`` (MatrixMarket coordinate) and ``<prefix>_b.txt``."""
    prefix = Path(prefix)
    mtx = prefix.with_name(prefix.name + ".mtx")
    rhs = prefix.with_name(prefix.name + "_b.txt")
    scipy.io.mmwrite(str(mtx), system.A.tocoo(), precision=17)
    np.savetxt(rhs, system.b, fmt="%.17g")
    return mtx, rhs

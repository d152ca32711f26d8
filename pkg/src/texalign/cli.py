"""Command line driver.

    texalign texture MESH TRAJECTORY IMAGES --out DIR
    texalign synth --out DIR [--seed S] [--perturb-rot RAD] [--perturb-trans M]
    texalign eval REPORT [--out DIR]
    texalign dump-labels MESH TRAJECTORY IMAGES --out DIR
    texalign dump-system MESH TRAJECTORY IMAGES --out DIR

Exit codes: 0 success, 1 failure (or ``eval`` mismatch), 2 bad input,
3 gauge deficiency.  The log level comes from ``TEXALIGN_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .align import GaugeDeficiencyError
from .pipeline import PipelineConfig, build_report, run_pipeline, write_outputs

log = logging.getLogger("texalign")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_GAUGE = 0, 1, 2, 3

GAUGE_HINT = ("hint: with lambda2 = 0 the global rigid motion of all fragments is unconstrained; "
              "pass a positive --lambda2 or omit it to use the default")


def _config(args) -> PipelineConfig:
    text = Path(args.config).read_text() if getattr(args, "config", None) else ""
    return PipelineConfig.from_text(text, lambda2=getattr(args, "lambda2", None),
                                    margin=getattr(args, "margin", None),
                                    threads=getattr(args, "threads", None),
                                    seed=getattr(args, "seed", None))


def _load_inputs(args):
    intr = args.intrinsics or Path(args.trajectory).with_name("intrinsics.json")
    for p in (args.mesh, args.trajectory, args.images, intr):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file or directory: {p}")
    mesh = io.read_obj(args.mesh)
    kfs = io.load_keyframes(args.trajectory, args.images, intr)
    return mesh, kfs, str(intr)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_texture(args) -> int:
    cfg = _config(args)
    mesh, kfs, intr = _load_inputs(args)
    res = run_pipeline(mesh, kfs, cfg)
    inputs = {"mesh": str(args.mesh), "trajectory": str(args.trajectory),
              "images": str(args.images), "intrinsics": intr}
    files, rep = write_outputs(res, args.out, extra={"command": "texture", "inputs": inputs})
    log.info("wrote %s", ", ".join(str(p) for p in files.values()))
    return EXIT_OK


def export_scene(scene, keyframes, out: Path) -> dict:
    """Write mesh, trajectories, intrinsics and images in the pipeline's input formats."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    io.write_obj(out / "mesh.obj", scene.mesh)
    io.write_trajectory(out / "trajectory.txt", [(kf.id, kf.pose) for kf in keyframes])
    io.write_trajectory(out / "trajectory_gt.txt", [(kf.id, kf.pose) for kf in scene.keyframes])
    io.write_intrinsics(out / "intrinsics.json", scene.keyframes[0].intrinsics)
    for kf in keyframes:
        io.write_png(out / "images" / f"{kf.id:06d}.png", kf.image)
    return {"mesh": out / "mesh.obj", "trajectory": out / "trajectory.txt",
            "images": out / "images", "intrinsics": out / "intrinsics.json"}


def run_synth(spec, pert, cfg: PipelineConfig, out: Path):
    from .synth import generate_scene, perturb_scene

    scene = generate_scene(spec)
    paths = export_scene(scene, perturb_scene(scene, pert), out / "scene")
    # the run consumes the exported files, not the in-memory scene
    mesh = io.read_obj(paths["mesh"])
    kfs = io.load_keyframes(paths["trajectory"], paths["images"], paths["intrinsics"])
    res = run_pipeline(mesh, kfs, cfg)
    extra = {"command": "synth", "scene": spec.to_dict(),
             "perturbation": {"rotation": pert.rotation, "translation": pert.translation,
                              "seed": pert.seed,
                              "brightness": None if pert.brightness is None else list(pert.brightness)}}
    files, rep = write_outputs(res, out, extra=extra)
    return res, rep


def cmd_synth(args) -> int:
    from .synth import Perturbation, SceneSpec, make_mesh

    cfg = _config(args)
    spec = SceneSpec(kind=args.kind, grid=tuple(args.grid), n_keyframes=args.keyframes,
                     texture=args.texture, seed=args.seed)
    diag = make_mesh(spec).bbox_diagonal()
    trans = 0.01 * diag if args.perturb_trans is None else args.perturb_trans
    bright = None
    if args.brighten:
        bright = tuple(float(args.brighten) if k == 1 else 0.0 for k in range(spec.n_keyframes))
    pert = Perturbation(args.perturb_rot, trans, args.seed, bright)
    _, rep = run_synth(spec, pert, cfg, Path(args.out))
    pd = rep["pair_distance"]
    ratio = pd["after_mean"] / pd["before_mean"] if pd["before_mean"] > 0 else 1.0
    print(f"matches {rep['n_matches']}  pair distance {pd['before_mean']:.6g} -> {pd['after_mean']:.6g}"
          f" (ratio {ratio:.3f})  seam rms {rep['seam_rms']['before']:.4g} -> "
          f"{rep['seam_rms']['after']:.4g}")
    return EXIT_OK


_COMPARED = ("pair_distance", "seam_rms", "n_matches", "residual_norm", "fragments")


def cmd_eval(args) -> int:
    """Re-run the configuration stored in a report and compare its metrics.

    Re-run outputs go to ``--out`` when given, else to a temporary
    directory that is removed afterwards.
    """
    import tempfile

    from .synth import Perturbation, SceneSpec

    old = json.loads(Path(args.report).read_text())
    cfg = PipelineConfig(**old["config"])
    where = tempfile.TemporaryDirectory() if args.out is None else contextlib.nullcontext(args.out)
    with where as tmp:
        if old.get("command") == "synth":
            p = old["perturbation"]
            pert = Perturbation(p["rotation"], p["translation"], p["seed"],
                                None if p["brightness"] is None else tuple(p["brightness"]))
            _, new = run_synth(SceneSpec.from_dict(old["scene"]), pert, cfg, Path(tmp))
        else:
            i = old["inputs"]
            mesh = io.read_obj(i["mesh"])
            kfs = io.load_keyframes(i["trajectory"], i["images"], i["intrinsics"])
            res = run_pipeline(mesh, kfs, cfg)
            if args.out is None:
                new = build_report(res)
            else:
                _, new = write_outputs(res, tmp)
    bad = [k for k in _COMPARED if not _close(old.get(k), new.get(k), args.rtol)]
    for k in _COMPARED:
        print(f"{k}: {'match' if k not in bad else 'MISMATCH'}")
    return EXIT_OK if not bad else EXIT_FAIL


def _close(a, b, rtol: float) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], rtol) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_close(x, y, rtol) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return bool(np.isclose(a, b, rtol=rtol, atol=1e-12))
    return a == b


def cmd_dump_labels(args) -> int:
    from .features import with_fragments
    from .pipeline import step0_keypoints, step1_view_selection
    from .viewselect import face_fragment_map

    cfg = _config(args)
    mesh, kfs, _ = _load_inputs(args)
    rasters, kps = step0_keypoints(mesh, kfs, cfg)
    _, labels, frags, _ = step1_view_selection(mesh, kfs, rasters, cfg)
    fmap = face_fragment_map(frags, mesh.n_faces)
    kps = [with_fragments(k, r, fmap) for k, r in zip(kps, rasters)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_label_ply(out / "labels.ply", mesh, labels)
    io.write_keypoints(out / "keypoints.txt", kps)
    np.savetxt(out / "labels.txt", labels, fmt="%d")
    return EXIT_OK


def cmd_dump_system(args) -> int:
    cfg = _config(args)
    mesh, kfs, _ = _load_inputs(args)
    res = run_pipeline(mesh, kfs, cfg, until="align")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_system(out / "system", res.system)
    np.savetxt(out / "omega.txt", res.solution.omega, fmt="%.17g")
    return EXIT_OK


def _common(p: argparse.ArgumentParser, inputs: bool) -> None:
    if inputs:
        p.add_argument("mesh")
        p.add_argument("trajectory")
        p.add_argument("images")
        p.add_argument("--intrinsics", help="JSON intrinsics (default: next to the trajectory)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value config file; flags win")
    p.add_argument("--threads", type=int)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--margin", type=float, help="metres (default 0.05 x bbox diagonal)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="texalign", description="Texture reconstruction with "
                                 "global fragment alignment.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("texture", help="texture a mesh from posed keyframes")
    _common(p, True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_texture)

    p = sub.add_parser("synth", help="synthetic scene, perturbation, run and evaluation")
    _common(p, False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-rot", type=float, default=0.02, help="radians")
    p.add_argument("--perturb-trans", type=float, help="metres (default 0.01 x bbox diagonal)")
    p.add_argument("--brighten", type=float, help="add this many levels to keyframe 1")
    p.add_argument("--kind", default="heightfield", choices=("heightfield", "plane"))
    p.add_argument("--grid", type=int, nargs=2, default=(100, 100), metavar=("NX", "NY"))
    p.add_argument("--keyframes", type=int, default=11)
    p.add_argument("--texture", default="noise", choices=("noise", "checker"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="re-run a report's configuration and compare metrics")
    p.add_argument("report")
    p.add_argument("--rtol", type=float, default=1e-9)
    p.add_argument("--out", help="keep re-run outputs here (default: a removed temporary dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-labels", help="face labels (PLY) and lifted keypoints")
    _common(p, True)
    p.set_defaults(func=cmd_dump_labels)

    p = sub.add_parser("dump-system", help="alignment system as MatrixMarket plus rhs")
    _common(p, True)
    p.set_defaults(func=cmd_dump_system)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("TEXALIGN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GaugeDeficiencyError as e:
        print(f"error: {e}\n{GAUGE_HINT}", file=sys.stderr)
        return EXIT_GAUGE
    except (io.FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end texturing with alignment.

step0   render virtual depth maps, detect keypoints, lift them to 3D
step1   view selection (MRF) and fragment decomposition
step2a  per fragment border: margin keypoints, matching, system rows
step2b  one sparse regularised least-squares solve
step2c  colour correction and texture atlas
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import Solution, assemble_system, default_lambda2, solve_corrections
from .atlas import Atlas, build_charts, export_textured_mesh, pack_charts
from .colour import ColourCorrection, SeamSamples, sample_seams, solve_colour
from .features import (DetectorConfig, KeypointSet, MatchSet, detect_keypoints, lift_to_3d,
                       match_keypoints, select_margin_keypoints, surface_mask,
                       with_fragments)
from .geometry import Mesh, face_adjacency
from .raster import rasterize
from .viewselect import (EnergyParams, data_costs, extract_fragments, face_fragment_map,
                         fragment_borders, solve_labeling)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    margin: float | None = None          # metres; default 0.05 x bbox diagonal
    lambda1: float = 1.0
    lambda2: float | None = None         # default scales with match weights
    detector: str = "harris"
    max_keypoints: int = 2000
    patch_size: int = 16
    silhouette_border: float = 16.0      # px kept clear of the rendered silhouette
    ratio: float = 0.8
    max_desc_dist: float | None = 0.25  # unit-norm descriptors; none disables
    max_3d_dist: float | None = None     # default: margin
    sigma: float | None = None           # default: margin / 2
    colour: bool = True
    colour_smooth: float | None = None
    seam_step: float | None = None       # default: median edge length
    atlas_pad: int = 2
    max_atlas_side: int = 8192
    solver: str = "cholesky"
    robust: bool = False
    max_sweeps: int = 10
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.margin is not None and not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.lambda2 is not None and self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        """Parse ``key = value`` lines; ``overrides`` win over the file."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        vals = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ValueError(f"config line {ln}: unknown key {k!r}")
            vals[k] = _parse_value(v, types[k])
        vals.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**vals)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(kind=self.detector, max_keypoints=self.max_keypoints,
                              patch_size=self.patch_size)


def _parse_value(v: str, typ):
    t = str(typ)
    if v.lower() == "none":
        return None
    if "bool" in t:
        return v.lower() in ("1", "true", "yes", "on")
    if "int" in t:
        return int(v)
    if "float" in t:
        return float(v)
    return v


@dataclass
class PipelineResult:
    mesh: Mesh
    keyframes: list
    config: PipelineConfig
    margin: float = 0.0
    rasters: list = field(default_factory=list)
    keypoints: list = field(default_factory=list)
    psi: np.ndarray | None = None
    labels: np.ndarray | None = None
    fragments: list = field(default_factory=list)
    borders: list = field(default_factory=list)
    matches: MatchSet = field(default_factory=MatchSet.empty)
    system: object = None
    solution: Solution | None = None
    seams: SeamSamples | None = None
    colour: ColourCorrection | None = None
    atlas: Atlas | None = None
    timings: dict = field(default_factory=dict)


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def step0_keypoints(mesh, keyframes, cfg: PipelineConfig):
    """Virtual depth maps and lifted keypoints for every keyframe."""
    det = cfg.detector_config()

    def one(k):
        kf = keyframes[k]
        r = rasterize(mesh, kf.pose, kf.intrinsics)
        mask = surface_mask(r, cfg.silhouette_border)
        kps = lift_to_3d(detect_keypoints(kf.image, det, mask), kf, r, mesh, keyframe_index=k)
        return r, kps

    out = _pmap(one, range(len(keyframes)), cfg.threads)
    return [o[0] for o in out], [o[1] for o in out]


def step1_view_selection(mesh, keyframes, rasters, cfg: PipelineConfig):
    params = EnergyParams(lambda1=cfg.lambda1, max_sweeps=cfg.max_sweeps)
    psi = data_costs(mesh, keyframes, rasters, params)
    adj = face_adjacency(mesh)
    labels = solve_labeling(psi, adj, params)
    frags = extract_fragments(labels, adj)
    borders = fragment_borders(frags, adj, mesh)
    return psi, labels, frags, borders


def step2a_matches(mesh, keyframes, rasters, keypoints, fragments, borders, margin,
                   cfg: PipelineConfig) -> MatchSet:
    label = {fr.id: fr.label for fr in fragments}
    max3d = cfg.max_3d_dist if cfg.max_3d_dist is not None else margin
    sigma = cfg.sigma if cfg.sigma is not None else margin / 2.0

    def one(g):
        ki, kj = label[g.pair[0]], label[g.pair[1]]
        si, sj = select_margin_keypoints(g, mesh, keypoints[ki], keypoints[kj], margin,
                                         (keyframes[ki], rasters[ki]), (keyframes[kj], rasters[kj]))
        return match_keypoints(si, sj, max3d, cfg.ratio, sigma, g.pair, cfg.max_desc_dist)

    return MatchSet.concatenate(_pmap(one, borders, cfg.threads))


def run_pipeline(mesh: Mesh, keyframes, cfg: PipelineConfig = PipelineConfig(),
                 until: str = "atlas") -> PipelineResult:
    """Run the stages in order; ``until`` in {"align", "colour", "atlas"}."""
    res = PipelineResult(mesh, list(keyframes), cfg)
    T = res.timings
    margin = cfg.margin if cfg.margin is not None else 0.05 * mesh.bbox_diagonal()
    res.margin = margin

    t0 = time.perf_counter()
    res.rasters, kps = step0_keypoints(mesh, keyframes, cfg)
    T["step0"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    res.psi, res.labels, res.fragments, res.borders = step1_view_selection(
        mesh, keyframes, res.rasters, cfg)
    T["step1"] = time.perf_counter() - t0
    fmap = face_fragment_map(res.fragments, mesh.n_faces)
    res.keypoints = [with_fragments(k, r, fmap) for k, r in zip(kps, res.rasters)]
    log.info("%d fragments, %d border groups", len(res.fragments), len(res.borders))

    t0 = time.perf_counter()
    res.matches = step2a_matches(mesh, keyframes, res.rasters, res.keypoints, res.fragments,
                                 res.borders, margin, cfg)
    ids = np.array([fr.id for fr in res.fragments], dtype=np.int64)
    res.system = assemble_system(res.matches, ids)
    T["step2a"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    lam = cfg.lambda2 if cfg.lambda2 is not None else default_lambda2(res.matches, len(ids))
    if len(res.matches):
        res.solution = solve_corrections(res.system, lam, method=cfg.solver, robust=cfg.robust)
    else:
        res.solution = Solution.zeros(ids)
    T["step2b"] = time.perf_counter() - t0
    log.info("%d matches, residual %.4g", len(res.matches), res.solution.residual_norm)

    if until == "align":
        T["step2"] = T["step2a"] + T["step2b"]
        return res

    t0 = time.perf_counter()
    step = cfg.seam_step if cfg.seam_step is not None else float(np.median(mesh.edge_lengths()))
    res.seams = sample_seams(res.borders, res.fragments, res.solution, keyframes, res.rasters,
                             mesh, step)
    if cfg.colour:
        res.colour = solve_colour(res.seams, mesh, res.fragments, cfg.colour_smooth,
                                  n_keyframes=len(keyframes))
    else:
        res.colour = ColourCorrection.zeros(len(keyframes), len(mesh.vertices))
    if until == "atlas":
        charts = build_charts(res.fragments, res.solution, res.colour, keyframes, mesh,
                              pad=cfg.atlas_pad)
        res.atlas = pack_charts(charts, pad=cfg.atlas_pad, n_faces=mesh.n_faces,
                                max_side=cfg.max_atlas_side)
    T["step2c"] = time.perf_counter() - t0
    T["step2"] = T["step2a"] + T["step2b"] + T["step2c"]
    return res


def build_report(res: PipelineResult, extra: dict | None = None) -> dict:
    """JSON-ready run summary; timings live under the ``timings`` key only."""
    from .synth import evaluate, spec_hash

    cfg = res.config.to_dict()
    # thread count never changes results; it travels with the timings
    threads = cfg.pop("threads")
    ev = evaluate(res, seed=res.config.seed, config_hash=spec_hash(cfg))
    frags = []
    for fr in res.fragments:
        d = {"id": fr.id, "keyframe_id": int(res.keyframes[fr.label].id),
             "n_faces": int(len(fr.faces)),
             "omega": [float(x) for x in res.solution.vector(fr.id)]}
        if res.atlas is not None:
            ch = next(c for c in res.atlas.charts if c.fragment == fr.id)
            x, y = res.atlas.placements[fr.id]
            d["chart"] = {"x": int(x), "y": int(y), "width": ch.width, "height": ch.height,
                          "source_x": ch.x0, "source_y": ch.y0}
        frags.append(d)
    rep = {
        "config": cfg,
        "config_hash": ev.config_hash,
        "seed": res.config.seed,
        "margin": res.margin,
        "fragments": frags,
        "n_matches": len(res.matches),
        "seam_rms": {"before": ev.seam_rms_pre, "after": ev.seam_rms_post},
        "pair_distance": {"before_mean": ev.pair_dist_pre_mean, "before_max": ev.pair_dist_pre_max,
                          "after_mean": ev.pair_dist_post_mean, "after_max": ev.pair_dist_post_max},
        "residual_norm": res.solution.residual_norm,
        "lambda2": res.solution.lambda2,
        "untextured_faces": np.flatnonzero(res.labels < 0).tolist(),
        "timings": dict(res.timings, threads=threads),
    }
    if extra:
        rep.update(extra)
    return rep


def write_outputs(res: PipelineResult, out_dir, name: str = "textured", extra: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = export_textured_mesh(res.mesh, res.atlas, out / f"{name}.obj")
    rep = build_report(res, extra)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    files["report"] = out / "report.json"
    return files, rep

"""Stage functions and the staged pipeline runner.

Each stage reads and writes container files in the work directory. A stage
is skipped when a stamp records the same hash of its parameters and input
file contents and all of its outputs exist.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import container_io as cio
from . import pq_index, query_eval, register, splat_renderer, synth, triangulate
from .config import InitConfig, PipelineConfig, PQConfig
from .matchgraph import build_graph, extract_proposals, load_proposals, save_proposals
from .scene_model import ClusterConfig, QueryConfig, RenderConfig

logger = logging.getLogger(__name__)

CATEGORIES = ("geometry", "semantics", "indexing")
STAMP_DIR = ".stamps"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- stage bodies -------------------------------------------------------------

def run_init(manifest, out, config: InitConfig = InitConfig()):
    views, refs = cio.load_manifest(manifest)
    seeds = triangulate.extract_seeds(views, [r.load() for r in refs], config.seeds)
    scene = triangulate.init_gaussians(seeds, config.scale_factor)
    cio.save_scene(out, scene)
    return scene


def render_views(scene, views, config: RenderConfig = RenderConfig(), workers: int = 1, only=None):
    ids = views.view_ids if only is None else list(only)

    def one(v):
        return splat_renderer.render_hits(scene, views.cameras[v], config)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            return dict(zip(ids, pool.map(one, ids)))
    return {v: one(v) for v in ids}


def run_hits(scene_path, manifest, out, config: RenderConfig = RenderConfig(), workers: int = 1, only=None):
    scene = cio.load_scene(scene_path)
    views, _ = cio.load_manifest(manifest)
    if only is not None:
        missing = [v for v in only if v not in views.cameras]
        if missing:
            raise KeyError(f"unknown view id(s): {missing}")
    hits = render_views(scene, views, config, workers, only)
    splat_renderer.save_hits(out, hits, len(scene))
    return hits


def run_cluster(manifest, hits_path, out, config: ClusterConfig = ClusterConfig(), workers: int = 1):
    views, refs = cio.load_manifest(manifest)
    hits = splat_renderer.load_hits(hits_path)
    vis = {v: splat_renderer.visibility_mask(hits[v], config.vis_threshold) for v in views.view_ids}
    edges = build_graph(views, [r.load() for r in refs], vis, config, workers=workers)
    proposals = extract_proposals(edges, views, config)
    save_proposals(out, proposals)
    return proposals


def run_register(scene_path, manifest, proposals_path, hits_path, out, workers: int = 1):
    scene = cio.load_scene(scene_path)
    views, _ = cio.load_manifest(manifest)
    result = register.register_features(scene, views, load_proposals(proposals_path),
                                        splat_renderer.load_hits(hits_path), workers=workers)
    cio.save_scene(out, result.scene)
    return result


def run_index(scene_path, out, config: PQConfig = PQConfig(), workers: int = 1):
    scene = cio.load_scene(scene_path)
    if scene.descriptors is None:
        raise ValueError(f"{scene_path} carries no descriptors; run register first")
    index = pq_index.build_index(scene.descriptors, config.m, config.iters, config.seed,
                                 train_mask=scene.labeled, workers=workers)
    pq_index.save_index(out, index)
    return index


def selection_queries(truth: synth.GroundTruth, hits, min_pixels: int = 8):
    """One query per (object, view) pair; the target is the silhouette restricted to covered pixels."""
    queries = []
    for o, emb in enumerate(truth.object_embeddings):
        for v in sorted(hits):
            covered = splat_renderer.visibility_mask(hits[v])
            gt = (truth.object_maps[v] == o + 1) & covered
            if gt.sum() >= min_pixels:
                queries.append((o, query_eval.SelectionQuery(emb, v, gt)))
    return queries


def evaluate_selection_report(scene, index, hits, truth, config: QueryConfig = QueryConfig(), grid=None):
    """Grid-searched tau, metrics at that tau and the per-pair table."""
    pairs = selection_queries(truth, hits)
    queries = [q for _, q in pairs]
    if not queries:
        raise ValueError("no object is visible in any view")

    def mean_iou(tau):
        preds = query_eval.evaluate_selection(scene, index, hits, queries, dataclasses.replace(config, tau_act=tau))
        return query_eval.miou_macc(preds, [q.gt_mask for q in queries])[0]

    best, sweep = query_eval.grid_search_tau(mean_iou, grid)
    cfg = dataclasses.replace(config, tau_act=best)
    preds = query_eval.evaluate_selection(scene, index, hits, queries, cfg)
    miou, macc = query_eval.miou_macc(preds, [q.gt_mask for q in queries])
    table = [{"object": o, "view": q.view, "iou": query_eval.mask_iou(p, q.gt_mask)}
             for (o, q), p in zip(pairs, preds)]
    return {"tau": best, "miou": miou, "macc": macc, "sweep": sweep, "pairs": table}


def evaluate_points_report(scene, points, labels, classes, config=query_eval.TransferConfig()):
    result = query_eval.transfer_to_points(scene, points, classes, config)
    metrics = query_eval.point_metrics(result.labels, labels, len(classes))
    metrics["unlabeled"] = float((result.labels < 0).mean()) if len(labels) else 0.0
    return metrics, result


def format_report(select: Optional[dict], points: Optional[dict]) -> str:
    lines = []
    if select is not None:
        lines.append(f"selection: tau={select['tau']:.3f} mIoU={select['miou']:.4f} mAcc@0.25={select['macc']:.4f}")
        lines.append("object view iou")
        lines += [f"{r['object']:6d} {r['view']:4d} {r['iou']:.4f}" for r in select["pairs"]]
    if points is not None:
        lines.append(f"points: mIoU={points['miou']:.4f} mAcc={points['macc']:.4f} "
                     f"accuracy={points['accuracy']:.4f} unlabeled={points['unlabeled']:.4f}")
    return "\n".join(lines) + "\n"


def run_evaluate(scene_path, index_path, hits_path, manifest, metrics_out, report_out,
                 query: QueryConfig = QueryConfig(), transfer=query_eval.TransferConfig()):
    doc = cio.manifest_document(manifest)
    base = Path(manifest).parent
    if "ground_truth" not in doc:
        raise cio.ManifestError(f"{manifest} lists no ground truth to evaluate against")
    truth = synth.load_truth(base / doc["ground_truth"])
    scene = cio.load_scene(scene_path)
    index = pq_index.load_index(index_path)
    hits = splat_renderer.load_hits(hits_path)
    select = evaluate_selection_report(scene, index, hits, truth, query)
    points = None
    if "points" in doc:
        pts, labels = synth.load_points(base / doc["points"])
        points, _ = evaluate_points_report(scene, pts, labels, truth.object_embeddings, transfer)
    Path(metrics_out).write_text(json.dumps({"selection": select, "points": points}, indent=2, sort_keys=True) + "\n")
    Path(report_out).write_text(format_report(select, points))
    return select, points


# -- staging ------------------------------------------------------------------

@dataclass
class Stage:
    name: str
    category: str
    inputs: list[Path]
    outputs: list[Path]
    params: dict
    action: Callable[[], object]
    input_fn: Optional[Callable[[], list[Path]]] = None  # inputs known only after upstream stages ran


@dataclass
class StageResult:
    name: str
    category: str
    ran: bool
    seconds: float


@dataclass
class PipelineReport:
    work_dir: Path
    stages: list[StageResult] = field(default_factory=list)

    def category_seconds(self) -> dict[str, float]:
        out = {c: 0.0 for c in CATEGORIES}
        for s in self.stages:
            out[s.category] += s.seconds
        return out

    def timing_lines(self) -> list[str]:
        return [f"{c}: {t:.3f} s" for c, t in self.category_seconds().items()]


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_key(stage: Stage) -> str:
    inputs = stage.input_fn() if stage.input_fn else stage.inputs
    doc = {"version": __version__, "stage": stage.name, "params": stage.params,
           "inputs": [[p.name, _digest(p)] for p in inputs]}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def _stamp_path(work: Path, name: str) -> Path:
    return work / STAMP_DIR / f"{name}.json"


def execute(stage: Stage, work: Path, force: bool = False) -> StageResult:
    t0 = time.perf_counter()
    try:
        key = None
        stamp = _stamp_path(work, stage.name)
        if not force and stamp.is_file() and all(p.is_file() for p in stage.outputs):
            key = stage_key(stage)
            if json.loads(stamp.read_text()).get("key") == key:
                logger.info("stage %s: up to date, skipped", stage.name)
                return StageResult(stage.name, stage.category, False, time.perf_counter() - t0)
        logger.info("stage %s: running", stage.name)
        stage.action()
        key = stage_key(stage)
        stamp.parent.mkdir(parents=True, exist_ok=True)
        stamp.write_text(json.dumps({"key": key}) + "\n")
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage.name, exc) from exc
    return StageResult(stage.name, stage.category, True, time.perf_counter() - t0)


def plan(config: PipelineConfig, workers: int = 1) -> list[Stage]:
    work = Path(config.paths.work_dir)
    data = work / "data"
    manifest = Path(config.paths.manifest) if config.paths.manifest else data / "manifest.json"
    scene, hits, props = work / "scene.pf", work / "hits.pf", work / "proposals.pf"
    sem, index = work / "scene_sem.pf", work / "index.pf"
    metrics, report = work / "metrics.json", work / "report.txt"

    def manifest_inputs():
        return cio.manifest_inputs(manifest)

    def truth_inputs():
        doc = cio.manifest_document(manifest)
        return [manifest.parent / doc[k] for k in ("ground_truth", "points") if k in doc]

    def asdict(x):
        return dataclasses.asdict(x)

    stages = []
    if not config.paths.manifest:
        stages.append(Stage("synth", "geometry", [], [manifest], asdict(config.synth),
                            lambda: synth.generate(config.synth, data)))
    stages += [
        Stage("init", "geometry", [], [scene], asdict(config.init),
              lambda: run_init(manifest, scene, config.init), manifest_inputs),
        Stage("hits", "geometry", [], [hits], asdict(config.render),
              lambda: run_hits(scene, manifest, hits, config.render, workers),
              lambda: [scene] + manifest_inputs()),
        Stage("cluster", "semantics", [], [props], asdict(config.cluster),
              lambda: run_cluster(manifest, hits, props, config.cluster, workers),
              lambda: [hits] + manifest_inputs()),
        Stage("register", "semantics", [], [sem], {},
              lambda: run_register(scene, manifest, props, hits, sem, workers),
              lambda: [scene, props, hits] + manifest_inputs()),
        Stage("index", "indexing", [sem], [index], asdict(config.pq),
              lambda: run_index(sem, index, config.pq, workers)),
    ]
    try:
        has_truth = not config.paths.manifest or "ground_truth" in cio.manifest_document(manifest)
    except cio.ManifestError as exc:
        raise StageError("init", exc) from exc
    if has_truth:
        stages.append(Stage("evaluate", "semantics", [], [metrics, report],
                            {"query": asdict(config.query), "transfer": asdict(config.transfer)},
                            lambda: run_evaluate(sem, index, hits, manifest, metrics, report,
                                                 config.query, config.transfer),
                            lambda: [sem, index, hits] + truth_inputs()))
    return stages


def run_pipeline(config: PipelineConfig, force: bool = False, workers: int = 1) -> PipelineReport:
    """Run every stage in order; raises :class:`StageError` naming the failing stage."""
    work = Path(config.paths.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    report = PipelineReport(work)
    for stage in plan(config, workers):
        report.stages.append(execute(stage, work, force))
    (work / "timing.txt").write_text("\n".join(report.timing_lines()) + "\n")
    return report

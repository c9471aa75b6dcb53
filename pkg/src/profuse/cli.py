"""Command-line entry point: ``profuse <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import container_io as cio
from . import pipeline, pq_index, query_eval, splat_renderer, synth
from .config import ConfigError, PipelineConfig, load_config

logger = logging.getLogger("profuse")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


class UsageError(ConfigError):
    pass


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace("synth", seed=args.seed).replace("pq", seed=args.seed)
    return cfg


def _override(cfg: PipelineConfig, section: str, **values) -> PipelineConfig:
    values = {k: v for k, v in values.items() if v is not None}
    return cfg.replace(section, **values) if values else cfg


def _check_out(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_embedding(path, row: Optional[int]) -> np.ndarray:
    arr = cio.load_array(path).astype(np.float64)
    if arr.ndim == 2:
        if row is None and arr.shape[0] != 1:
            raise UsageError(f"{path} holds {arr.shape[0]} embeddings; choose one with --row")
        arr = arr[row or 0]
    return query_eval.normalize_query(arr)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig) -> int:
    cfg = _override(cfg, "synth", object_count=args.objects, view_count=args.views, object_kind=args.kind,
                    embedding_dim=args.dim, warp_jitter=args.jitter, mask_dropout=args.dropout,
                    confidence_corruption=args.corruption)
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise UsageError(f"{out} already holds a scene; pass --force to overwrite")
    manifest, truth = synth.generate(cfg.synth, out)
    print(f"wrote {manifest} ({len(truth.objects)} objects, {len(truth.object_maps)} views)")
    return EXIT_OK


def cmd_init(args, cfg) -> int:
    cfg = _override(cfg, "init", stride=args.stride, tau_alpha=args.tau_alpha, scale_factor=args.scale_factor)
    scene = pipeline.run_init(args.manifest, _check_out(Path(args.out), args.force), cfg.init)
    print(f"wrote {args.out} ({len(scene)} gaussians)")
    return EXIT_OK


def cmd_hits(args, cfg) -> int:
    cfg = _override(cfg, "render", top_k=args.topk)
    only = None if args.view is None else [args.view]
    hits = pipeline.run_hits(args.scene, args.manifest, _check_out(Path(args.out), args.force), cfg.render,
                             args.threads, only)
    covered = sum(int(splat_renderer.visibility_mask(h).sum()) for h in hits.values())
    print(f"wrote {args.out} ({len(hits)} view(s), {covered} covered pixels)")
    return EXIT_OK


def cmd_cluster(args, cfg) -> int:
    out = _check_out(Path(args.out), args.force)
    hits_path = Path(args.hits) if args.hits else out.with_name(out.stem + "_hits.pf")
    if not args.hits:
        cfg = _override(cfg, "render", top_k=args.topk)
        pipeline.run_hits(args.scene, args.manifest, hits_path, cfg.render, args.threads)
    props = pipeline.run_cluster(args.manifest, hits_path, out, cfg.cluster, args.threads)
    print(f"wrote {out} ({len(props)} proposals)")
    return EXIT_OK


def cmd_register(args, cfg) -> int:
    out = _check_out(Path(args.out), args.force)
    hits_path = Path(args.hits) if args.hits else out.with_name(out.stem + "_hits.pf")
    if not args.hits:
        cfg = _override(cfg, "render", top_k=args.topk)
        pipeline.run_hits(args.scene, args.manifest, hits_path, cfg.render, args.threads)
    result = pipeline.run_register(args.scene, args.manifest, args.proposals, hits_path, out, args.threads)
    print(f"wrote {out} ({int(result.scene.labeled.sum())} / {len(result.scene)} gaussians labeled)")
    return EXIT_OK


def cmd_index(args, cfg) -> int:
    cfg = _override(cfg, "pq", m=args.m)
    index = pipeline.run_index(args.scene, _check_out(Path(args.out), args.force), cfg.pq, args.threads)
    print(f"wrote {args.out} (m={index.codebook.m}, k={index.codebook.k}, {len(index)} codes)")
    return EXIT_OK


def _view_hits(args, cfg, scene, view):
    if args.hits:
        hits = splat_renderer.load_hits(args.hits)
        if view not in hits:
            raise UsageError(f"{args.hits} has no hits for view {view}")
        return hits[view]
    views, _ = cio.load_manifest(args.manifest)
    if view not in views.cameras:
        raise UsageError(f"unknown view id {view}")
    return splat_renderer.render_hits(scene, views.cameras[view], cfg.render)


def cmd_query(args, cfg) -> int:
    cfg = _override(cfg, "query", tau_act=args.tau, gamma=args.gamma, shortlist_size=args.shortlist)
    cfg = _override(cfg, "render", top_k=args.topk)
    if not args.hits and not args.manifest:
        raise UsageError("query needs --manifest (to render the view) or --hits")
    scene = cio.load_scene(args.scene)
    index = pq_index.load_index(args.index)
    q = _load_embedding(args.embedding, args.row)
    sel = query_eval.select_gaussians(scene, index, q, cfg.query)
    mask = query_eval.activation_mask(_view_hits(args, cfg, scene, args.view), sel.indices, cfg.query.gamma,
                                      len(scene))
    cio.save_array(_check_out(Path(args.out), args.force), mask.astype(np.uint8), "u8")
    print(f"wrote {args.out} ({len(sel.indices)} active gaussians, {int(mask.sum())} pixels on)")
    return EXIT_OK


def _emit(text: str, out: Optional[str], force: bool) -> None:
    if out:
        _check_out(Path(out), force).write_text(text)
    sys.stdout.write(text)


def cmd_eval_select(args, cfg) -> int:
    cfg = _override(cfg, "render", top_k=args.topk)
    scene = cio.load_scene(args.scene)
    index = pq_index.load_index(args.index)
    if args.hits:
        hits = splat_renderer.load_hits(args.hits)
    else:
        views, _ = cio.load_manifest(args.manifest)
        hits = pipeline.render_views(scene, views, cfg.render, args.threads)
    doc = cio.manifest_document(args.manifest)
    truth_path = Path(args.truth) if args.truth else Path(args.manifest).parent / doc.get("ground_truth", "")
    truth = synth.load_truth(truth_path)
    grid = [args.tau] if args.tau is not None else None
    report = pipeline.evaluate_selection_report(scene, index, hits, truth, cfg.query, grid)
    _emit(pipeline.format_report(report, None), args.out, args.force)
    return EXIT_OK


def cmd_eval_points(args, cfg) -> int:
    cfg = _override(cfg, "transfer", knn_k=args.knn, mahal_sigma=args.sigma, temperature=args.temperature)
    scene = cio.load_scene(args.scene)
    pts, labels = synth.load_points(args.points)
    classes = cio.load_array(args.classes).astype(np.float64)
    metrics, result = pipeline.evaluate_points_report(scene, pts, labels, classes, cfg.transfer)
    if args.labels_out:
        cio.save_array(_check_out(Path(args.labels_out), args.force), (result.labels + 1).astype(np.uint16), "u16")
    _emit(pipeline.format_report(None, metrics), args.out, args.force)
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    if args.work:
        cfg = cfg.replace("paths", work_dir=args.work)
    report = pipeline.run_pipeline(cfg, force=args.force, workers=args.threads)
    for s in report.stages:
        print(f"{s.name}: {'ran' if s.ran else 'skipped'}")
    print("\n".join(report.timing_lines()))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands get SUPPRESS defaults so flags given before the subcommand are kept
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    common.add_argument("--config", help="pipeline YAML config")
    common.add_argument("--threads", type=int, help="worker cap for parallel stages")
    common.add_argument("--seed", type=int, help="override the synth and PQ seeds")
    common.add_argument("--force", action="store_true", help="overwrite outputs / rerun every stage")
    common.add_argument("--verbose", "-v", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="profuse", parents=[_global_flags(suppress=False)],
                                     description="Training-free semantic registration for Gaussian scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", dest="config", help="alias of --config")
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--kind", choices=("sphere", "box", "mixed"), default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--corruption", type=float, default=None)

    p = add("init", cmd_init, "triangulate seeds and initialise gaussians")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--tau-alpha", type=float, default=None)
    p.add_argument("--scale-factor", type=float, default=None)

    p = add("hits", cmd_hits, "render per-pixel top-K hits (debug)")
    p.add_argument("--scene", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--view", type=int, default=None, help="single view (default all)")
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--out", required=True)

    for name, func, help_ in (("cluster", cmd_cluster, "build 3D context proposals"),
                              ("register", cmd_register, "register proposal descriptors onto gaussians")):
        p = add(name, func, help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--scene", required=True)
        p.add_argument("--hits", default=None, help="precomputed hits (rendered when omitted)")
        p.add_argument("--topk", type=int, default=None)
        p.add_argument("--out", required=True)
        if name == "register":
            p.add_argument("--proposals", required=True)

    p = add("index", cmd_index, "train the PQ index")
    p.add_argument("--scene", required=True)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("query", cmd_query, "activation mask for one embedding in one view")
    p.add_argument("--scene", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--row", type=int, default=None, help="row of a multi-embedding file")
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--hits", default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--shortlist", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("eval-select", cmd_eval_select, "object selection mIoU / mAcc against ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--hits", default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--tau", type=float, default=None, help="fixed tau instead of the grid search")
    p.add_argument("--out", default=None)

    p = add("eval-points", cmd_eval_points, "point label transfer metrics")
    p.add_argument("--scene", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--knn", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--labels-out", default=None)
    p.add_argument("--out", default=None)

    p = add("run", cmd_run, "run the whole pipeline")
    p.add_argument("--work", default=None, help="override paths.work_dir")
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("threads", 1), ("force", False), ("verbose", False)):
        if getattr(args, name, None) is None:
            setattr(args, name, default)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

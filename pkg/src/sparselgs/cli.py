"""Batch command-line orchestrator.

One subcommand per pipeline stage, chained through the scene manifest:

    synth      fabricate a synthetic scene with ground truth
    validate   schema-check every file a manifest references
    align      three-step cross-view mask alignment
    fit-codec  fit per-granularity bijection codecs on aligned features
    train-rgb  stage-A geometry/appearance fit (writes a checkpoint)
    train-sem  stage-B semantic training (writes the final checkpoint)
    render     export color/feature renders of the trained scene
    query      run a query set against the trained scene
    eval       query with ground truth required; prints mIoU / mAcc

Exit codes: 0 success, 2 validation failure, 1 any other error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats
from .alignment import align_scene
from .featcodec import FeatureCodec
from .pipeline_io import (
    SceneManifest,
    generate_synthetic,
    ingest_stereo_init,
    load_scene_inputs,
    parallel_map,
    validate,
    write_scene,
)
from .query import run_queries
from .scene import Camera, Granularity, PipelineConfig
from .trainer import SemanticTargetMap, stage_a, stage_b, write_training_log

GRAN_BY_NAME = {g.name: g for g in Granularity}


def _load_manifest(args) -> SceneManifest:
    manifest = SceneManifest.load(args.manifest)
    overrides = dict(kv.split("=", 1) for kv in (args.config_override or []))
    if overrides:
        manifest.config = manifest.config.with_overrides(overrides)
    manifest.config.validate()
    return manifest


def _outputs_dir(manifest: SceneManifest) -> Path:
    out = manifest.root / "outputs"
    out.mkdir(exist_ok=True)
    return out


# -- stages ----------------------------------------------------------------------


def stage_synth(args) -> int:
    from .pipeline_io import synthetic_default_config

    cfg = synthetic_default_config(args.seed)
    overrides = dict(kv.split("=", 1) for kv in (args.config_override or []))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    scene = generate_synthetic(
        seed=args.seed,
        n_views=args.views,
        n_objects=args.objects,
        image_size=args.size,
        embed_dim=args.embed_dim,
        config=cfg,
    )
    manifest = write_scene(scene, args.out)
    print(f"wrote scene with {args.views} views, {args.objects} objects to {manifest.path}")
    return 0


def stage_validate(args) -> int:
    manifest = _load_manifest(args)
    report = validate(manifest)
    print(report.summary())
    return 0 if report.passed else 2


def stage_align(args) -> int:
    manifest = _load_manifest(args)
    inputs = load_scene_inputs(manifest)
    graphs, masksets = align_scene(
        inputs.masksets, inputs.match_fields,
        {v: inputs.points[v] for v in inputs.cameras},
        inputs.cameras, inputs.store, manifest.config,
    )
    out = _outputs_dir(manifest) / "aligned"
    out.mkdir(exist_ok=True)
    doc = {}
    for gran, graph in sorted(graphs.items()):
        roots = sorted(graph.groups())
        group_index = {root: i for i, root in enumerate(roots)}
        feats = np.stack([inputs.store[graph.canonical[root]] for root in roots])
        feat_rel = f"outputs/aligned/features_{gran.name}.bin"
        formats.write_tensor(manifest.root / feat_rel, feats.astype(np.float32)[:, :, None])
        views_doc = {}
        for v in sorted(inputs.cameras):
            ms = masksets[(v, gran)]
            mask_rel = f"outputs/aligned/masks_v{v}_{gran.name}.png"
            formats.write_label_map(manifest.root / mask_rel, ms.label_map())
            regions = {
                str(m.mask_id): group_index[graph.group_of((v, m.mask_id))] for m in ms.masks
            }
            views_doc[str(v)] = {"labels": mask_rel, "regions": regions}
        doc[gran.name] = {
            "features": feat_rel,
            "views": views_doc,
            "graph": graph.to_json(),
        }
    rel = "outputs/aligned/alignment.json"
    (manifest.root / rel).write_text(json.dumps(doc, indent=2))
    manifest.outputs["aligned"] = rel
    manifest.save()
    pair_counts = {g.name: len(graphs[g].pairs) for g in graphs}
    print(f"alignment written to {rel}; accepted pairs per granularity: {pair_counts}")
    return 0


def stage_fit_codec(args) -> int:
    manifest = _load_manifest(args)
    rel = manifest.outputs.get("aligned")
    if not rel:
        print("run `slgs align` first: manifest has no alignment output", file=sys.stderr)
        return 1
    doc = json.loads(manifest.resolve(rel).read_text())
    codec_rels = {}
    for name, entry in sorted(doc.items()):
        gran = GRAN_BY_NAME[name]
        feats = formats.read_tensor(manifest.resolve(entry["features"]))[:, :, 0].astype(np.float64)
        codec = FeatureCodec.fit(feats, d=manifest.config.semantic_dim, granularity=gran)
        crel = f"outputs/codec_{name}.bin"
        codec.save(manifest.root / crel)
        codec_rels[name] = crel
        print(f"{name}: {len(codec)} features -> {codec.code_dim}-d codes "
              f"(min code gap {codec.min_pairwise_code_distance():.4f})")
    manifest.outputs["codecs"] = codec_rels
    manifest.save()
    return 0


def stage_train_rgb(args) -> int:
    manifest = _load_manifest(args)
    inputs = load_scene_inputs(manifest)
    cloud = ingest_stereo_init(inputs.cloud_points, inputs.cloud_colors)
    entries = []
    cloud, refined = stage_a(cloud, inputs.cameras, inputs.images, manifest.config, log_entries=entries)
    out = _outputs_dir(manifest)
    formats.save_checkpoint(out / "stage_a.ply", cloud)
    (out / "cameras_refined.json").write_text(
        json.dumps({str(v): cam.to_json() for v, cam in refined.items()}, indent=2)
    )
    write_training_log(out / "train_rgb.csv", entries)
    manifest.outputs.update(
        {
            "stage_a": "outputs/stage_a.ply",
            "cameras_refined": "outputs/cameras_refined.json",
            "train_rgb_log": "outputs/train_rgb.csv",
        }
    )
    manifest.save()
    from .trainer import psnr
    from .rasterizer import render

    vals = [psnr(render(cloud, refined[v]).color, inputs.images[v]) for v in sorted(refined)]
    print(f"stage A done: {len(cloud)} gaussians, training-view PSNR " +
          " ".join(f"{v:.1f}" for v in vals))
    return 0


def _load_refined_cameras(manifest: SceneManifest):
    rel = manifest.outputs.get("cameras_refined")
    if rel and manifest.resolve(rel).exists():
        doc = json.loads(manifest.resolve(rel).read_text())
        return {int(v): Camera.from_json(c) for v, c in doc.items()}
    return {e.view: e.camera for e in manifest.views}


def _load_codecs(manifest: SceneManifest) -> dict:
    rels = manifest.outputs.get("codecs") or {}
    if not rels:
        raise FileNotFoundError("run `slgs fit-codec` first: manifest has no codecs")
    return {GRAN_BY_NAME[name]: FeatureCodec.load(manifest.resolve(rel)) for name, rel in rels.items()}


def _semantic_targets(manifest: SceneManifest, codecs: dict) -> dict:
    doc = json.loads(manifest.resolve(manifest.outputs["aligned"]).read_text())
    targets = {}
    for name, entry in doc.items():
        gran = GRAN_BY_NAME[name]
        feats = formats.read_tensor(manifest.resolve(entry["features"]))[:, :, 0].astype(np.float64)
        codec = codecs[gran]
        for v_str, vdoc in entry["views"].items():
            v = int(v_str)
            labels = formats.read_label_map(manifest.resolve(vdoc["labels"]))
            codes = np.zeros(labels.shape + (codec.code_dim,))
            valid = labels > 0
            for label_str, group in vdoc["regions"].items():
                code = codec.encode(feats[int(group)])
                codes[labels == int(label_str)] = code
            targets[(v, gran)] = SemanticTargetMap(v, gran, codes, valid)
    return targets


def stage_train_sem(args) -> int:
    manifest = _load_manifest(args)
    out = _outputs_dir(manifest)
    ckpt = out / "stage_a.ply"
    if not ckpt.exists():
        print("run `slgs train-rgb` first: no stage_a.ply", file=sys.stderr)
        return 1
    cloud = formats.load_checkpoint(ckpt)
    cameras = _load_refined_cameras(manifest)
    codecs = _load_codecs(manifest)
    targets = _semantic_targets(manifest, codecs)
    images = {e.view: formats.read_image(manifest.resolve(e.image)) for e in manifest.views}
    entries = []
    cloud = stage_b(cloud, cameras, images, targets, manifest.config, log_entries=entries)
    formats.save_checkpoint(out / "stage_b.ply", cloud)
    write_training_log(out / "train_sem.csv", entries)
    manifest.outputs.update({"stage_b": "outputs/stage_b.ply", "train_sem_log": "outputs/train_sem.csv"})
    manifest.save()
    print(f"stage B done: {len(cloud)} gaussians, granularities "
          + ",".join(g.name for g in cloud.granularities))
    return 0


def _load_trained(manifest: SceneManifest):
    out = _outputs_dir(manifest)
    ckpt = out / "stage_b.ply"
    if not ckpt.exists():
        ckpt = out / "stage_a.ply"
    if not ckpt.exists():
        raise FileNotFoundError("no checkpoint; run train-rgb / train-sem first")
    return formats.load_checkpoint(ckpt), _load_refined_cameras(manifest)


def stage_render(args) -> int:
    manifest = _load_manifest(args)
    cloud, cameras = _load_trained(manifest)
    out = Path(args.out) if args.out else _outputs_dir(manifest) / "renders"
    out.mkdir(parents=True, exist_ok=True)
    cfg = manifest.config
    grans = cloud.granularities

    def render_view(v):
        from .rasterizer import render

        r = render(
            cloud, cameras[v], grans,
            alpha_clamp=cfg.alpha_clamp, transmittance_floor=cfg.transmittance_floor,
            cutoff_sigma=cfg.cutoff_sigma, cov2d_floor=cfg.cov2d_floor,
        )
        formats.write_image(out / f"view{v}.png", r.color)
        for g in grans:
            formats.write_tensor(out / f"view{v}_{g.name}.bin", r.features[g].astype(np.float32))
        return v

    parallel_map(render_view, sorted(cameras))
    print(f"renders written to {out}")
    return 0


def _run_query_stage(args, require_gt: bool) -> int:
    manifest = _load_manifest(args)
    cloud, cameras = _load_trained(manifest)
    codecs = _load_codecs(manifest)
    queries = args.queries or manifest.queries
    if not queries:
        print("no query set: pass --queries or add one to the manifest", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else _outputs_dir(manifest) / "report"
    report = run_queries(
        cloud, cameras, codecs, manifest.resolve(queries), manifest.config,
        out_dir=out, root=manifest.root,
    )
    if require_gt and "miou" not in report:
        print("query set has no ground truth; cannot evaluate", file=sys.stderr)
        return 1
    if "miou" in report:
        print(f"mIoU {report['miou']:.4f}  mAcc {report['macc']:.4f}  ({len(report['queries'])} queries)")
    else:
        print(f"{len(report['queries'])} queries answered; report at {out/'report.json'}")
    return 0


def stage_query(args) -> int:
    return _run_query_stage(args, require_gt=False)


def stage_eval(args) -> int:
    return _run_query_stage(args, require_gt=True)


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slgs", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, queries=False):
        sp.add_argument("--manifest", required=True, help="path to manifest.json")
        sp.add_argument("--config-override", action="append", metavar="KEY=VALUE",
                        help="override a config field for this stage")
        sp.add_argument("--out", default=None, help="output directory override")
        if queries:
            sp.add_argument("--queries", default=None, help="query-set JSON (defaults to the manifest's)")

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--views", type=int, default=3)
    sp.add_argument("--objects", type=int, default=10)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--embed-dim", type=int, default=512)
    sp.add_argument("--config-override", action="append", metavar="KEY=VALUE")
    sp.set_defaults(fn=stage_synth)

    for name, fn, has_queries in (
        ("validate", stage_validate, False),
        ("align", stage_align, False),
        ("fit-codec", stage_fit_codec, False),
        ("train-rgb", stage_train_rgb, False),
        ("train-sem", stage_train_sem, False),
        ("render", stage_render, False),
        ("query", stage_query, True),
        ("eval", stage_eval, True),
    ):
        sp = sub.add_parser(name)
        common(sp, queries=has_queries)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("run", help="dispatch a stage by name")
    sp.add_argument("--stage", required=True,
                    choices=["validate", "align", "fit-codec", "train-rgb", "train-sem", "render", "query", "eval"])
    common(sp, queries=True)
    sp.set_defaults(fn=None)
    return p


STAGES = {
    "validate": stage_validate,
    "align": stage_align,
    "fit-codec": stage_fit_codec,
    "train-rgb": stage_train_rgb,
    "train-sem": stage_train_sem,
    "render": stage_render,
    "query": stage_query,
    "eval": stage_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn = args.fn or STAGES[args.stage]
    try:
        return fn(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

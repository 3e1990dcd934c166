"""Command-line entry point: ``mvpose {synth,detect,pose,run,eval,overlay}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mvpose import io
from mvpose.detect import run_detection
from mvpose.errors import InsufficientViewsError, ManifestError
from mvpose.pipeline import (
    SCHEMA_VERSION,
    ResultBundle,
    SceneManifest,
    bundle_from_json,
    emit_overlays,
    evaluate,
    load_manifest,
    run_pipeline,
    write_results,
)
from mvpose.pose import coarse_pose

log = logging.getLogger("mvpose")

EXIT_OK = 0
EXIT_INVALID_MANIFEST = 2
EXIT_ALL_FAILED = 3


def _manifest(args) -> SceneManifest:
    m = load_manifest(args.manifest)
    if getattr(args, "views", None):
        m = m.restrict_views(args.views)
    if getattr(args, "scorer", None):
        m.scorer = args.scorer
    if getattr(args, "refiner", None):
        m.pose.refiner = args.refiner
    if getattr(args, "seed", None) is not None:
        m.seed = args.seed
    return m


def _out_dir(args, manifest: SceneManifest | None = None) -> Path:
    if args.out:
        return Path(args.out)
    return manifest.output_dir if manifest is not None else Path("results")


def _detect(m: SceneManifest):
    if m.scorer == "features":
        if m.templates is None:
            raise ManifestError("feature scoring needs a template library in the manifest")
        return run_detection(m.cameras, m.masklets, m.diameters, library=m.templates, config=m.detect)
    if m.ground_truth is None:
        raise ManifestError("oracle scoring needs ground-truth modal masks in the manifest")
    return run_detection(m.cameras, m.masklets, m.diameters, gt_masks=m.ground_truth.masks_by_class(), config=m.detect)


def cmd_synth(args) -> int:
    from mvpose.synth import SceneSpec, generate_synthetic_scene, write_scene

    spec = SceneSpec(n_views=args.views or 5, seed=args.seed or 0, occluder=args.occluder)
    if args.instances > 1:
        spec.instances = ["instrument"] * args.instances
    scene = generate_synthetic_scene(spec)
    path = write_scene(scene, _out_dir(args))
    print(path)
    return EXIT_OK


def cmd_detect(args) -> int:
    m = _manifest(args)
    instances = _detect(m)
    out = _out_dir(args, m)
    io.write_json(
        out / "detections.json",
        {
            "schema_version": SCHEMA_VERSION,
            "scorer": m.scorer,
            "instances": [
                {"class_id": i.class_id, "center": i.center.tolist(), "score": i.score, "masklets": i.masklets}
                for i in instances
            ],
        },
    )
    print(f"{len(instances)} instance(s) -> {out / 'detections.json'}")
    return EXIT_OK


def cmd_pose(args) -> int:
    m = _manifest(args)
    instances = _detect(m)
    masks = {mk.key: mk.mask for ms in m.masklets.values() for mk in ms}
    out = _out_dir(args, m)
    (out / "debug").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, inst in enumerate(instances):
        cams = [c for c in m.cameras if c.view_id in inst.masklets]
        view_masks = {v: masks[(v, mid)] for v, mid in inst.masklets.items()}
        best, hyps = coarse_pose(inst.center, cams, view_masks, m.meshes[inst.class_id], m.pose)
        lines = ["hypothesis,view_id,score"] + [
            f"{h.index},{v},{s!r}" for h in hyps for v, s in sorted(h.per_view_scores.items())
        ]
        (out / "debug" / f"hypotheses_{k}.csv").write_text("\n".join(lines) + "\n")
        entries.append(
            {
                "instance_id": k,
                "class_id": inst.class_id,
                "views": inst.view_ids,
                "T_coarse": best.pose_world.matrix().ravel().tolist(),
                "score": best.aggregate_score,
            }
        )
    io.write_json(out / "coarse_poses.json", {"schema_version": SCHEMA_VERSION, "instances": entries})
    print(f"{len(entries)} coarse pose(s) -> {out / 'coarse_poses.json'}")
    return EXIT_OK


def _report(bundle: ResultBundle) -> None:
    for r in bundle.instances:
        status = "ok" if r.ok else f"FAILED ({r.error})"
        print(f"instance {r.instance_id} [{r.class_id}] views={','.join(r.views)} score={r.score:.3f} {status}")
    if bundle.metrics:
        mt = bundle.metrics
        print(f"AP={mt['ap']:.3f} AP50={mt['ap50']:.3f} matched {mt['n_matched']}/{mt['n_ground_truth']}")
        for e in mt["instances"]:
            print(
                f"  instance {e['instance_id']}: ADD {e['add']:.3f} mm, "
                f"t {e['translation_mm']:.3f} mm, R {e['rotation_deg']:.3f} deg"
            )


def cmd_run(args) -> int:
    m = _manifest(args)
    bundle = run_pipeline(m, threads=args.threads)
    out = _out_dir(args, m)
    path = write_results(bundle, out)
    if args.overlays:
        emit_overlays(bundle, m, out / "overlays")
    _report(bundle)
    print(f"results -> {path}")
    return EXIT_ALL_FAILED if bundle.all_failed else EXIT_OK


def _load_results(args, m: SceneManifest) -> ResultBundle:
    path = Path(args.results) if args.results else _out_dir(args, m) / "results.json"
    with open(path) as f:
        return bundle_from_json(json.load(f))


def cmd_eval(args) -> int:
    m = _manifest(args)
    if m.ground_truth is None:
        raise ManifestError("evaluation needs ground truth in the manifest")
    bundle = _load_results(args, m)
    bundle.metrics = evaluate(bundle, m)
    io.write_json(_out_dir(args, m) / "metrics.json", {"schema_version": SCHEMA_VERSION, **bundle.metrics})
    _report(bundle)
    return EXIT_OK


def cmd_overlay(args) -> int:
    m = _manifest(args)
    bundle = _load_results(args, m)
    written = emit_overlays(bundle, m, _out_dir(args, m) / "overlays")
    print(f"{len(written)} overlay(s) written")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvpose", description="Multi-view instrument detection and 6D pose estimation.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        if manifest:
            sp.add_argument("--manifest", required=True, type=Path)
            sp.add_argument("--scorer", choices=("features", "oracle"))
            sp.add_argument("--refiner", choices=("identity", "centroid"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--views", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("synth", help="generate a ground-truthed synthetic scene")
    common(sp, manifest=False)
    sp.add_argument("--occluder", action="store_true")
    sp.add_argument("--instances", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    for name, fn, text in (
        ("detect", cmd_detect, "multi-view instance detection"),
        ("pose", cmd_pose, "detection plus coarse pose"),
        ("run", cmd_run, "full pipeline"),
    ):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=fn)
        if name == "run":
            sp.add_argument("--overlays", action="store_true", help="also write overlay images")

    for name, fn, text in (("eval", cmd_eval, "metrics on saved results"), ("overlay", cmd_overlay, "overlay images")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--results", type=Path, help="results.json (default: <out>/results.json)")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID_MANIFEST
    try:
        return args.func(args)
    except ManifestError as e:
        print(f"error: invalid manifest: {e}", file=sys.stderr)
        return EXIT_INVALID_MANIFEST
    except InsufficientViewsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ALL_FAILED


if __name__ == "__main__":
    sys.exit(main())

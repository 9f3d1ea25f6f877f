"""Command-line entry points: train, eval, serve, and synthetic-data
generation."""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml


def _load_yaml(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def cmd_train(args) -> int:
    from .dataio import DatasetManifest, ManifestDataset
    from .model import ModelConfig, ToyPromptableModel, inject_lora, load_checkpoint
    from .training import TrainConfig, train

    doc = _load_yaml(args.config)
    model_doc = doc.pop("model", {})
    cfg = TrainConfig.from_dict(doc) if doc else TrainConfig()
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        if not model.lora_injected:
            inject_lora(model)
    else:
        model = inject_lora(ToyPromptableModel(ModelConfig(**model_doc)))
    root = args.root or os.path.dirname(os.path.abspath(args.data))
    manifest = DatasetManifest.load(args.data)
    dataset = ManifestDataset(manifest, root, split="train")
    print(f"training on {len(dataset)} images from {manifest.dataset!r} -> {args.out}")
    result = train(model, dataset, cfg, out_dir=args.out)
    epochs = [h for h in result.history if h["type"] == "epoch"]
    if epochs:
        last = epochs[-1]
        print(
            f"final val IoU: box {last['val_iou_box']:.3f}, "
            f"point {last['val_iou_point']:.3f}"
        )
    return 0


def cmd_eval(args) -> int:
    from .dataio import DatasetManifest, ManifestDataset
    from .evaluation import EvalConfig, emit_report, run_dataset
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    model.eval()
    root = args.root or os.path.dirname(os.path.abspath(args.data))
    manifest = DatasetManifest.load(args.data)
    samples = ManifestDataset(manifest, root, split=args.split)
    cfg = EvalConfig(
        start_mode=args.start,
        max_clicks=args.clicks,
        seed=args.seed,
        instances_per_image=args.instances_per_image,
    )
    report = run_dataset(model, samples, cfg, dataset_name=manifest.dataset)
    paths = emit_report(report, args.out)
    for row in report.summary():
        print(
            f"{row['dataset']} {row['start_mode']} clicks={row['clicks']}: "
            f"{row['mean_iou']:.3f} ± {row['std_iou']:.3f} (n={row['n']})"
        )
    print(json.dumps(paths, indent=2))
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceSettings, serve

    settings = ServiceSettings.from_env()
    if args.port is not None:
        settings.port = args.port
    serve(settings)
    return 0


def cmd_make_blobs(args) -> int:
    from .dataio import ManifestRules, make_manifest, save_annotations, save_image
    from .synthetic import make_blob_dataset

    samples = make_blob_dataset(args.count, seed=args.seed, size=args.size)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "annotations"), exist_ok=True)
    for s in samples:
        save_image(s.image, os.path.join(args.out, "images", f"{s.image_id}.png"))
        save_annotations(
            s.masks,
            os.path.join(args.out, "annotations", f"{s.image_id}.json"),
            image_id=s.image_id,
        )
    rules = ManifestRules(
        val_fraction=args.val_fraction, test_fraction=args.test_fraction, seed=args.seed
    )
    manifest, rejects = make_manifest(args.out, rules, dataset_name="blobs")
    manifest.save(os.path.join(args.out, "manifest.jsonl"))
    assert not rejects
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.count} images to {args.out}; splits: {counts}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Promptable cell/gland segmentation: training, evaluation, and serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fine-tune on a dataset manifest")
    p_train.add_argument("--config", help="YAML file mirroring TrainConfig (plus a 'model' section)")
    p_train.add_argument("--data", required=True, help="manifest path (line-delimited JSON)")
    p_train.add_argument("--root", help="dataset root; defaults to the manifest's directory")
    p_train.add_argument("--out", required=True, help="output directory for metrics and checkpoints")
    p_train.add_argument("--checkpoint", help="resume/fine-tune from an existing checkpoint")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="run the iterative-click evaluation")
    p_eval.add_argument("--model", required=True, help="checkpoint path")
    p_eval.add_argument("--data", required=True, help="manifest path")
    p_eval.add_argument("--root", help="dataset root; defaults to the manifest's directory")
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--start", default="box", choices=["point", "box"])
    p_eval.add_argument("--clicks", type=int, default=5)
    p_eval.add_argument("--instances-per-image", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_serve = sub.add_parser("serve", help="start the annotation service (env-configured)")
    p_serve.add_argument("--port", type=int)
    p_serve.set_defaults(fn=cmd_serve)

    p_blobs = sub.add_parser("make-blobs", help="generate a synthetic blob dataset")
    p_blobs.add_argument("--out", required=True)
    p_blobs.add_argument("--count", type=int, default=200)
    p_blobs.add_argument("--size", type=int, default=128)
    p_blobs.add_argument("--seed", type=int, default=0)
    p_blobs.add_argument("--val-fraction", type=float, default=0.1)
    p_blobs.add_argument("--test-fraction", type=float, default=0.1)
    p_blobs.set_defaults(fn=cmd_make_blobs)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

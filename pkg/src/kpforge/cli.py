"""``kpforge`` command line: generate, train, eval, infer, bench, plot.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import cv2

from .dataset import DatasetError, load_manifest, load_schema, split_dataset

log = logging.getLogger("kpforge")

VARIANTS = ("ihm224", "ihm56", "hm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _existing_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def checkpoint_dir(root: str | Path, tool: str, variant: str) -> Path:
    """One checkpoint directory per (tool, variant)."""
    return Path(root) / tool / variant


# subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    from .compositor import generate_dataset, load_assets, load_backgrounds
    from .heatmaps import render_targets, save_stack_images

    assets = load_assets(_existing_dir(args.assets, "assets directory"))
    backgrounds = load_backgrounds(_existing_dir(args.backgrounds, "backgrounds directory"))
    distractors = load_assets(_existing_dir(args.distractors, "distractors directory")) if args.distractors else []
    if not assets:
        raise UsageError(f"no PNG assets in {args.assets}")
    if not backgrounds:
        raise UsageError(f"no background images in {args.backgrounds}")
    schema = load_schema(_existing_file(args.schema, "schema file")) if args.schema else None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.min_on_canvas < 1:
        raise UsageError("--min-on-canvas must be >= 1")
    samples = generate_dataset(assets, backgrounds, args.count, args.seed, args.out,
                               distractors=distractors, size=args.size, schema=schema,
                               min_on_canvas=args.min_on_canvas)
    if args.dump_heatmaps:
        schema = load_schema(Path(args.out) / "schema.json")
        for s in samples[:args.dump_heatmaps]:
            stack = render_targets(s, schema, s.width)
            save_stack_images(stack, Path(args.out) / "heatmaps", Path(s.image_path).stem)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "count": len(samples)}))
    return 0


def cmd_train(args) -> int:
    import torch

    from .model import ModelConfig, build_model, save_checkpoint
    from .training import KeypointDataset, TrainConfig, train

    manifest_path = _existing_file(args.manifest, "manifest")
    schema = load_schema(_existing_file(args.schema, "schema file"))
    config = TrainConfig()
    if args.config:
        data = json.loads(_existing_file(args.config, "train config").read_text(encoding="utf-8"))
        config = TrainConfig.from_dict(data)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    model_config = ModelConfig.for_variant(args.variant, schema.num_channels, args.input_size)
    manifest = load_manifest(manifest_path, schema)
    train_m, val_m = split_dataset(manifest, config.validation_fraction, config.seed)
    weights = None if args.backbone_weights == "random" else args.backbone_weights
    torch.manual_seed(config.seed)  # head and decoder initialisation
    model = build_model(model_config, weights, args.allow_random_backbone)
    out = checkpoint_dir(args.out, schema.tool_name, args.variant)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n",
                                           encoding="utf-8")
    train_set = KeypointDataset(train_m, model_config.input_size, model_config.head_sizes,
                                config.augmentation, config.seed)
    val_set = KeypointDataset(val_m, model_config.input_size, model_config.head_sizes, None)
    state = train(model, train_set, val_set, config, out_dir=out, schema=schema)
    if state.best_checkpoint is None:
        save_checkpoint(model, schema, out)
    print(json.dumps({"checkpoint": str(out), "epochs": state.epoch, "best_epoch": state.best_epoch,
                      "best_val_loss": state.best_val_loss, "stopped_early": state.stopped_early}))
    return 0


def _load_checkpoint(path: str):
    from .model import load_checkpoint

    return load_checkpoint(_existing_dir(path, "checkpoint"))


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, parse_alpha_grid
    from .inference import DecodeConfig

    ckpt = _existing_dir(args.checkpoint, "checkpoint")
    manifest_path = _existing_file(args.manifest, "manifest")
    try:
        alphas = parse_alpha_grid(args.alphas)
    except ValueError as exc:
        raise UsageError(f"bad --alphas: {exc}") from exc
    model, schema = _load_checkpoint(str(ckpt))
    manifest = load_manifest(manifest_path, schema)
    model_id = args.model_id or f"{schema.tool_name}/{ckpt.name}"
    report = evaluate_model(model, manifest, alphas, model_id, DecodeConfig(args.threshold), args.level)
    report.save(args.out)
    print(json.dumps({"report": str(args.out), "pck@0.1": report.pck.pck,
                      "mean_error_px": report.errors.mean}))
    return 0


def cmd_infer(args) -> int:
    from .inference import DecodeConfig, detect

    ckpt = _existing_dir(args.checkpoint, "checkpoint")
    image_path = _existing_file(args.image, "image")
    image = cv2.imread(str(image_path), cv2.IMREAD_COLOR)
    if image is None:
        raise UsageError(f"cannot decode image {image_path}")
    model, schema = _load_checkpoint(str(ckpt))
    for det in detect(model, image, schema, DecodeConfig(args.threshold), args.level):
        print(json.dumps(det.to_dict()))
    return 0


def cmd_bench(args) -> int:
    from .inference import DecodeConfig, benchmark_latency
    from .training import load_image

    ckpt = _existing_dir(args.checkpoint, "checkpoint")
    manifest_path = _existing_file(args.manifest, "manifest")
    model, schema = _load_checkpoint(str(ckpt))
    manifest = load_manifest(manifest_path, schema)
    if len(manifest) == 0:
        raise UsageError("manifest is empty")
    images = [load_image(manifest, s) for s in manifest.samples[:args.count]]
    report = benchmark_latency(model, images, schema, DecodeConfig(args.threshold),
                               warmup=args.warmup, min_samples=args.count)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_plot(args) -> int:
    from .evaluation import EvalReport, compare_reports, format_table, plot_reports

    reports = [EvalReport.load(_existing_file(p, "report")) for p in args.reports]
    try:
        comparison = compare_reports(reports)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    plot_reports(reports, args.out)
    Path(args.out).with_suffix(".json").write_text(json.dumps(comparison, indent=2) + "\n",
                                                   encoding="utf-8")
    print(format_table(comparison))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kpforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="compose a cut-and-paste training set")
    p.add_argument("--assets", required=True, help="directory of RGBA PNG cutouts with JSON sidecars")
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--distractors", help="RGBA PNGs pasted in front for occlusion copies")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--schema", help="schema JSON (default: asset keypoints, no merge groups)")
    p.add_argument("--min-on-canvas", type=int, default=1, metavar="K",
                   help="keypoints each placement must keep on the canvas (default 1)")
    p.add_argument("--dump-heatmaps", type=int, default=0, metavar="K",
                   help="write target heatmaps of the first K samples as PNGs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one network for one tool")
    p.add_argument("--manifest", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--config", help="JSON mirroring TrainConfig")
    p.add_argument("--variant", choices=VARIANTS, default="ihm56")
    p.add_argument("--out", required=True, help="workspace root; writes OUT/<tool>/<variant>/")
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--backbone-weights", default="imagenet",
                   help="'imagenet', a ResNet50 state-dict file, or 'random' (needs "
                        "--allow-random-backbone)")
    p.add_argument("--allow-random-backbone", action="store_true",
                   help="fall back to random backbone weights (testing only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK report for a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--alphas", default="0.02:0.2:0.02")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--level", type=int, default=-1)
    p.add_argument("--model-id")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect keypoints in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--level", type=int, default=-1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="latency of forward pass + decoding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="overlay PCK curves and error bars of several reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv: list[str] | None = None) -> int:
    from .model import CheckpointError, MissingPretrainedWeightsError, ModelConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, ModelConfigError, CheckpointError,
            MissingPretrainedWeightsError) as exc:
        print(f"kpforge {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"kpforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

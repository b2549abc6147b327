"""``attnlens`` command line: make-toy, attribute, eval, selftest, demo."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import formats, plotting
from .attribution import AttributionOptions, explain, upsample
from .errors import AttnLensError, ConfigError
from .models import Model, ModelConfig, random_weights, toy_swin_config, toy_vit_config

TOY_CONFIGS = {"vit": toy_vit_config, "swin": toy_swin_config}
PERTURBATION_COLUMNS = ("Top Neg", "Top Pos", "Target Neg", "Target Pos")
SEGMENTATION_COLUMNS = ("mIoU", "mAP", "Pixel Acc", "mF1")


def _fmt(x):
    return f"{float(x):.9g}"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_model(config_path, weights_path) -> Model:
    try:
        cfg = ModelConfig.from_dict(json.loads(Path(config_path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: not valid JSON: {exc}") from None
    return Model(cfg, formats.load_weights(weights_path, cfg))


def options_from_args(args, cfg) -> AttributionOptions:
    opts = AttributionOptions.preset(args.method if args.method != "rollout" else "attn")
    if args.start_stage is not None:
        opts = replace(opts, start_stage=args.start_stage)
    if args.no_gradients:
        opts = replace(opts, use_gradients=False)
    if args.no_std:
        opts = replace(opts, use_std_scaling=False)
    if args.no_normalize:
        opts = replace(opts, use_sum_normalize=False)
    target = getattr(args, "target_class", "predicted")
    if target not in (None, "predicted"):
        try:
            opts = replace(opts, target_class=int(target))
        except ValueError:
            raise ConfigError(f"--target-class must be an integer or 'predicted', got {target!r}")
    try:
        opts.resolve_stage(cfg.num_stages)
    except AttnLensError as exc:
        raise ConfigError(str(exc)) from None
    if opts.target_class is not None and not 0 <= opts.target_class < cfg.num_classes:
        raise ConfigError(f"--target-class {opts.target_class} outside [0, {cfg.num_classes})")
    return opts


# --- commands ---------------------------------------------------------------

def cmd_make_toy(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TOY_CONFIGS[args.variant]()
    weights = random_weights(cfg, args.seed)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    formats.save_weights(out / "weights.bin", weights)
    formats.load_weights(out / "weights.bin", cfg)
    data = ev.make_synthetic_dataset(args.seed, args.samples, cfg.image_size, args.noise,
                                     cfg.channels)
    formats.save_dataset(out / "dataset", data)
    print(f"wrote {cfg.variant} toy model and {len(data)} samples to {out}")
    return 0


def cmd_attribute(args):
    model = load_model(args.config, args.weights)
    cfg = model.config
    image = formats.load_image(args.image)
    opts = options_from_args(args, cfg)
    kind = "rollout" if args.method == "rollout" else "relevance"
    heatmap, trace = explain(model, image, opts, kind)
    pixel_map = upsample(heatmap.grid, image.shape[0], image.shape[1], args.upsample)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_heatmap(out / "heatmap", pixel_map)
    formats.save_csv_matrix(out / "grid.csv", heatmap.grid)
    plotting.plot_attribution(image, pixel_map, out / "heatmap.png", title=args.method)
    _write_json(out / "result.json", {
        "method": args.method,
        "predicted_class": trace.predicted,
        "target_class": trace.class_index,
        "degenerate": heatmap.degenerate,
        "logits": [float(v) for v in trace.logits],
        "options": {
            "start_stage": opts.resolve_stage(cfg.num_stages),
            "use_gradients": opts.use_gradients,
            "use_std_scaling": opts.use_std_scaling,
            "use_sum_normalize": opts.use_sum_normalize,
            "upsample": args.upsample,
        },
    })
    print(f"predicted class {trace.predicted}; heatmap written to {out}")
    return 0


def eval_methods(args, cfg):
    """(label, AttributionOptions, kind) rows for ``eval``."""
    if args.method:
        opts = options_from_args(args, cfg)
        kind = "rollout" if args.method == "rollout" else "relevance"
        rows = [(args.method, opts, kind)]
    else:
        if args.start_stage is not None or args.no_gradients or args.no_std or args.no_normalize:
            raise ConfigError("--start-stage and --no-* flags need an explicit --method")
        rows = []
        if cfg.variant == "vit":
            rows.append(("Rollout", AttributionOptions.preset("attn"), "rollout"))
        rows.append(("Attn", AttributionOptions.preset("attn"), "relevance"))
        rows.append(("Attn Layer Norm", AttributionOptions.preset("attn-ln"), "relevance"))
        if cfg.num_stages > 1:
            rows.append(("Attn Layer Norm (Layer1)",
                         AttributionOptions.preset("attn-ln", start_stage=1), "relevance"))
            rows.append(("Attn Layer Norm (stage 0)",
                         AttributionOptions.preset("attn-ln", start_stage=0), "relevance"))
    if args.include_oracle:
        rows.append(("Oracle (gt mask)", None, "oracle"))
    return rows


def _pixel_map_fn(opts, kind, method):
    def fn(model, image, class_index):
        o = replace(opts, target_class=class_index)
        heatmap, _ = explain(model, image, o, kind)
        return upsample(heatmap.grid, image.shape[0], image.shape[1], method)
    return fn


def _maps_for(model, dataset, opts, kind, target_mode, method):
    if kind == "oracle":
        if any(s.mask is None for s in dataset):
            raise ConfigError("oracle heatmaps need ground-truth masks")
        return [s.mask.astype(np.float64) for s in dataset]
    fn = _pixel_map_fn(opts, kind, method)

    def one(sample):
        cls = model.predict(sample.image) if target_mode == "top" else sample.label
        return fn(model, sample.image, cls)

    return ev._parallel_map(one, list(dataset))


def cmd_eval(args):
    model = load_model(args.config, args.weights)
    cfg = model.config
    dataset = formats.load_dataset(args.dataset)
    if not dataset:
        raise ConfigError(f"{args.dataset}: dataset is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = eval_methods(args, cfg)
    summary = {"mode": args.mode, "variant": cfg.variant, "samples": len(dataset), "methods": {}}

    if args.mode == "perturbation":
        curves = {}
        curve_rows = []
        for label, opts, kind in rows:
            curves[label] = {}
            for mode_name, target_mode in (("Top", "top"), ("Target", "target")):
                maps = _maps_for(model, dataset, opts, kind, target_mode, args.upsample)
                for pol_name, polarity in (("Neg", "negative"), ("Pos", "positive")):
                    res = ev.perturbation_curve(model, dataset, None, polarity, target_mode,
                                                pixel_maps=maps, fill=args.fill)
                    curves[label][f"{mode_name} {pol_name}"] = res
                    curve_rows.extend((label, mode_name, pol_name, f, a)
                                      for f, a in zip(res.fractions, res.accuracy))
            summary["methods"][label] = {c: curves[label][c].auc for c in PERTURBATION_COLUMNS}
        with open(out / "perturbation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method",) + PERTURBATION_COLUMNS)
            for label, vals in summary["methods"].items():
                w.writerow([label] + [_fmt(vals[c]) for c in PERTURBATION_COLUMNS])
        with open(out / "perturbation_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method", "mode", "polarity", "fraction", "accuracy"))
            for label, mode_name, pol, f, a in curve_rows:
                w.writerow([label, mode_name, pol, _fmt(f), _fmt(a)])
        _write_json(out / "perturbation.json", summary)
        plotting.plot_perturbation(curves, out / "perturbation.png")
    else:
        if any(s.mask is None for s in dataset):
            raise ConfigError("segmentation needs a mask for every sample")
        for label, opts, kind in rows:
            maps = _maps_for(model, dataset, opts, kind, "top", args.upsample)
            summary["methods"][label] = ev.segmentation_scores(dataset, maps).as_dict()
        with open(out / "segmentation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method",) + SEGMENTATION_COLUMNS)
            for label, vals in summary["methods"].items():
                w.writerow([label] + [_fmt(vals[c]) for c in SEGMENTATION_COLUMNS])
        _write_json(out / "segmentation.json", summary)
        plotting.plot_segmentation(summary["methods"], out / "segmentation.png")

    for label, vals in summary["methods"].items():
        print(label + ": " + ", ".join(f"{k} {v:.4f}" for k, v in vals.items()))
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    if args.config or args.weights:
        if not (args.config and args.weights):
            raise ConfigError("selftest needs both --config and --weights, or neither")
        models = [(Path(args.config).stem, load_model(args.config, args.weights))]
    else:
        models = [(name, Model(make(), random_weights(make(), args.seed)))
                  for name, make in TOY_CONFIGS.items()]
    results = run_selftest(models, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_demo(args):
    from .demo import CORNER_TOKEN, TARGET_TOKENS, run_corner_demo

    demo = run_corner_demo()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_csv_matrix(out / "with_std.csv", demo.with_std.grid)
    formats.save_csv_matrix(out / "without_std.csv", demo.without_std.grid)
    plotting.plot_corner_demo(demo, out / "corner_demo.png")
    side = demo.with_std.grid.shape[1]
    flat = lambda rc: int(rc[0]) * side + int(rc[1])  # noqa: E731
    report = {
        "argmax_with_std": flat(demo.with_std.argmax),
        "argmax_without_std": flat(demo.without_std.argmax),
        "max_std_token": int(np.argmax(demo.token_std)),
        "corner_token": CORNER_TOKEN,
        "target_tokens": list(TARGET_TOKENS),
        "target_logit_share": float(demo.value_share[list(TARGET_TOKENS)].sum()),
    }
    _write_json(out / "corner_demo.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


# --- parser -----------------------------------------------------------------

def _add_method_flags(p, default_method):
    p.add_argument("--method", choices=("attn", "attn-ln", "rollout"), default=default_method)
    p.add_argument("--start-stage", type=int, default=None)
    p.add_argument("--no-gradients", action="store_true")
    p.add_argument("--no-std", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--upsample", choices=("nearest", "bilinear"), default="nearest")


def build_parser():
    parser = argparse.ArgumentParser(prog="attnlens",
                                     description="Relevance heatmaps for toy ViT/Swin models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="write random toy weights, config and dataset")
    p.add_argument("--variant", choices=tuple(TOY_CONFIGS), default="swin")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("attribute", help="heatmap for one image")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-class", default="predicted")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; attribution is deterministic")
    _add_method_flags(p, "attn-ln")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("eval", help="perturbation or segmentation test over a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("perturbation", "segmentation"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fill", type=float, default=0.0, help="value written into removed pixels")
    p.add_argument("--include-oracle", action="store_true",
                   help="add a row that uses the ground-truth mask as heatmap")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; eval is deterministic")
    _add_method_flags(p, None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run invariant and oracle checks")
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("demo", help="constructed corner-collapse example")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AttnLensError, OSError) as exc:
        print(f"attnlens {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

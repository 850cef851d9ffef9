"""Command-line driver: convert, split, train, eval, quantize, pack, inspect, bench, infer.

Exit codes: 0 success, 1 internal failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (
    emit_report,
    flops,
    fps_estimate,
    measure_latency,
    measure_load_time,
    write_report,
)
from .container import (
    ContainerError,
    InferenceModel,
    load_container_copy,
    map_container,
    validate_container,
    write_container,
)
from .dataset import SCHEMES, DatasetError, SplitManifest, export_png, load_csv, read_png, split
from .head import TrainConfig, evaluate
from .nn import BackboneSpec, init_weights, param_count
from .pipeline import CACHE_ENV, cache_directory, resolve_backbone, run_training
from .quant import (
    QuantizedHead,
    load_head,
    model_size_estimate,
    quantize_head,
    save_head,
    size_reduction,
)

log = logging.getLogger("slr")

# Published retraining hyperparameters; flags override a --config file, which overrides these.
DEFAULTS = {
    "seed": 0,
    "normalization": "signed",
    "backbone": "flatten",
    "lr": 0.01,
    "steps": 5000,
    "batch_size": 100,
    "eval_interval": 10,
    "val_batch_size": 100,
    "workers": 1,
}


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


# --------------------------------------------------------------------------
# commands


def cmd_convert(args) -> int:
    dataset = load_csv(args.csv)
    if len(dataset) == 0:
        raise InputError(f"{args.csv}: 0 images, nothing to convert")
    written = export_png(dataset, args.out_dir)
    hist = dataset.histogram()
    n_classes = sum(1 for c in hist.values() if c)
    text = f"{written} images, {n_classes} classes\n" + "\n".join(f"{k} {v}" for k, v in hist.items())
    _emit(args, {"images": written, "classes": n_classes, "histogram": hist}, text)
    return 0


def cmd_split(args) -> int:
    dataset = load_csv(args.csv)
    if len(dataset) == 0:
        raise InputError(f"{args.csv}: 0 images, nothing to split")
    manifest = split(dataset, args.seed)
    if args.out:
        manifest.save(args.out)
    n_train, n_val, n_test = manifest.sizes()
    _emit(
        args,
        {"seed": args.seed, "train": n_train, "val": n_val, "test": n_test},
        f"train={n_train} val={n_val} test={n_test}",
    )
    return 0


def cmd_train(args) -> int:
    dataset = load_csv(args.csv)
    if len(dataset) == 0:
        raise InputError(f"{args.csv}: 0 images, nothing to train on")
    spec = resolve_backbone(args.backbone)
    config = TrainConfig(args.lr, args.steps, args.batch_size, args.eval_interval, args.val_batch_size, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = cache_directory(out_dir / "cache")

    result = run_training(dataset, spec, config, args.seed, args.normalization, cache_dir, args.workers)
    head = result.head
    result.manifest.save(out_dir / "split.txt")
    (out_dir / "backbone.txt").write_text(spec.to_text())
    save_head(
        out_dir / "head.npz",
        head,
        backbone=spec.to_text(),
        seed=args.seed,
        normalization=args.normalization,
    )
    result.metrics.save_csv(out_dir / "metrics.csv")

    total_params = param_count(spec) + head.param_count()
    sizes = {
        "real32_bytes": model_size_estimate(total_params, 32).total_bytes,
        "quant8_bytes": model_size_estimate(total_params, 8).total_bytes,
    }
    report = emit_report(
        result.metrics,
        flops(spec, head.n_labels),
        None,
        sizes,
        model_name=args.backbone,
        params=total_params,
        retrain_seconds=result.retrain_seconds,
        extra={
            "test": {"accuracy": result.test_accuracy, "cross_entropy": result.test_xent},
            "config": {**vars(config), "normalization": args.normalization, "backbone": args.backbone},
        },
    )
    write_report(report, out_dir / "report.json", out_dir / "report.txt")

    final = result.metrics.final
    payload = {
        "train_accuracy": final.train_acc,
        "val_accuracy": final.val_acc,
        "train_cross_entropy": final.train_xent,
        "val_cross_entropy": final.val_xent,
        "test_accuracy": result.test_accuracy,
        "cache_reused": result.cache_reused,
    }
    text = (
        f"train_accuracy={final.train_acc:.4f} val_accuracy={final.val_acc:.4f}\n"
        f"train_xent={final.train_xent:.5f} val_xent={final.val_xent:.5f} test_accuracy={result.test_accuracy:.4f}"
    )
    _emit(args, payload, text)
    return 0


def _open_model(path) -> InferenceModel:
    return map_container(path)


def cmd_eval(args) -> int:
    model = _open_model(args.container)
    dataset = load_csv(args.csv)
    if len(dataset) == 0:
        raise InputError(f"{args.csv}: 0 images, nothing to evaluate")
    if args.subset == "all":
        ids = np.arange(len(dataset))
    else:
        manifest = SplitManifest.load(args.split) if args.split else split(dataset, args.seed)
        ids = {"train": manifest.train_ids, "val": manifest.val_ids, "test": manifest.test_ids}[args.subset]
    if len(ids) == 0:
        raise InputError(f"{args.subset} subset is empty")
    head = model.head_params.materialize()
    bottlenecks = np.concatenate(
        [model.bottlenecks(dataset.pixels[ids[i : i + 512]]) for i in range(0, len(ids), 512)]
    )
    acc, xent = evaluate(head, bottlenecks, dataset.class_indices[ids])
    _emit(
        args,
        {"subset": args.subset, "images": int(len(ids)), "accuracy": acc, "cross_entropy": xent},
        f"{args.subset}: {len(ids)} images accuracy={acc:.4f} cross_entropy={xent:.5f}",
    )
    return 0


def cmd_quantize(args) -> int:
    head, meta = load_head(args.head)
    if isinstance(head, QuantizedHead):
        raise InputError(f"{args.head} is already quantized")
    qhead = quantize_head(head)
    out = args.out or str(Path(args.head).with_name(Path(args.head).stem + "_q8.npz"))
    save_head(out, qhead, **meta)
    before = model_size_estimate(head.param_count(), 32)
    after = model_size_estimate(qhead.param_count(), 8)
    reduction = size_reduction(before, after)
    payload = {
        "params": head.param_count(),
        "real32_bytes": before.total_bytes,
        "quant8_bytes": after.total_bytes,
        "reduction": reduction,
        "out": out,
    }
    text = (
        f"params={head.param_count()} real32_bytes={before.total_bytes} quant8_bytes={after.total_bytes}\n"
        f"payload reduction {reduction * 100:.1f}%"
    )
    if args.csv:
        dataset = load_csv(args.csv)
        spec = BackboneSpec.from_text(meta["backbone"])
        seed = int(meta.get("seed", args.seed))
        scheme = meta.get("normalization", args.normalization)
        model32 = InferenceModel.from_parts(spec, init_weights(spec, seed), head, scheme)
        ids = split(dataset, seed).val_ids
        feats = model32.bottlenecks(dataset.pixels[ids])
        labels = dataset.class_indices[ids]
        acc32, _ = evaluate(head, feats, labels)
        acc8, _ = evaluate(qhead.dequantize(), feats, labels)
        payload.update(val_accuracy_real32=acc32, val_accuracy_quant8=acc8)
        text += f"\nval_accuracy real32={acc32:.4f} quant8={acc8:.4f} delta={(acc8 - acc32) * 100:+.2f}pp"
    _emit(args, payload, text)
    return 0


def cmd_pack(args) -> int:
    head, meta = load_head(args.head)
    if "backbone" not in meta:
        raise InputError(f"{args.head} carries no backbone description; was it written by `train`?")
    spec = BackboneSpec.from_text(meta["backbone"])
    seed = int(meta.get("seed", args.seed))
    scheme = meta.get("normalization", args.normalization)
    if args.quantize and not isinstance(head, QuantizedHead):
        head = quantize_head(head)
    written = write_container(spec, init_weights(spec, seed), head, None, args.out, scheme)
    dtype = "quant8" if isinstance(head, QuantizedHead) else "real32"
    _emit(args, {"out": str(args.out), "bytes": written, "head_dtype": dtype}, f"wrote {args.out} ({written} bytes, {dtype} head)")
    return 0


def cmd_inspect(args) -> int:
    report = validate_container(args.container)
    _emit(args, report.to_dict(), report.to_text())
    return 0 if report.ok else 2


def cmd_bench(args) -> int:
    device = args.device_gflops * 1e9
    payload: dict = {"device_gflops": args.device_gflops}
    lines = []
    if args.model_gflops is not None:
        fps = fps_estimate(args.model_gflops * 1e9, device)
        payload.update(model_gflops=args.model_gflops, fps=fps)
        lines.append(f"{fps:.2f} fps")
    elif args.model:
        model = _open_model(args.model)
        breakdown = flops(model.spec, len(model.label_names))
        fps = fps_estimate(breakdown.total_flops, device)
        if args.csv:
            images = load_csv(args.csv).pixels[: max(args.samples, 1)]
        else:
            images = np.random.default_rng(args.seed).integers(0, 256, (16, 784), dtype=np.uint8)
        stats, _ = measure_latency(model, images, args.warmup, args.samples)
        mapped_ms = measure_load_time(map_container, args.model)
        copy_ms = measure_load_time(load_container_copy, args.model)
        payload.update(
            flops=breakdown.to_dict(),
            fps=fps,
            latency={"samples": stats.samples, "mean_ms": stats.mean_ms, "median_ms": stats.median_ms, "p95_ms": stats.p95_ms},
            load_ms={"mapped": mapped_ms, "copy": copy_ms},
        )
        lines += [
            f"flops per inference: {breakdown.total_flops}",
            f"{fps:.2f} fps at {args.device_gflops:g} GFLOP/s",
            f"latency ms: mean {stats.mean_ms:.3f} median {stats.median_ms:.3f} p95 {stats.p95_ms:.3f}",
            f"load ms: mapped {mapped_ms:.3f} copy {copy_ms:.3f}",
        ]
        if args.report:
            Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    else:
        spec = resolve_backbone(args.backbone)
        breakdown = flops(spec, args.labels)
        fps = fps_estimate(breakdown.total_flops, device)
        payload.update(flops=breakdown.to_dict(), fps=fps)
        lines += [f"{layer.name} macs={layer.macs} flops={layer.flops}" for layer in breakdown.layers]
        lines += [f"total flops: {breakdown.total_flops}", f"{fps:.2f} fps"]
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_infer(args) -> int:
    model = _open_model(args.container)
    if args.image:
        pixels = read_png(args.image)
    elif args.csv is not None and args.row is not None:
        dataset = load_csv(args.csv)
        if not 0 <= args.row < len(dataset):
            raise InputError(f"row {args.row} out of range for {len(dataset)} images")
        pixels = dataset.pixels[args.row]
    else:
        raise InputError("infer needs --image PNG or --csv CSV --row N")
    if not 1 <= args.k <= len(model.label_names):
        raise InputError(f"-k must lie in [1, {len(model.label_names)}]")
    start = time.perf_counter()
    top = model.predict_topk(pixels, args.k)
    latency_ms = (time.perf_counter() - start) * 1000.0
    payload = {"top": [{"label": name, "probability": p} for name, p in top], "latency_ms": latency_ms}
    text = "\n".join(f"{name} {p:.4f}" for name, p in top) + f"\nlatency_ms={latency_ms:.3f}"
    _emit(args, payload, text)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default, help="PRNG seed (default 0)")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS if suppress else False)
    p.add_argument("--normalization", choices=SCHEMES, default=default, help="pixel scaling (default signed)")
    p.add_argument("--config", default=default, help="JSON file with option defaults")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slr", description=__doc__.splitlines()[0], parents=[_common(False)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common(True)]

    p = sub.add_parser("convert", parents=common, help="CSV -> PNG images")
    p.add_argument("csv")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("split", parents=common, help="80/10/10 split manifest")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=common, help="retrain the softmax head on cached bottlenecks")
    p.add_argument("csv")
    p.add_argument("--out-dir", default="run")
    p.add_argument("--backbone", help="flatten | desk | path to spec file (default flatten)")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--val-batch-size", type=int)
    p.add_argument("--workers", type=int, help=f"bottleneck threads; cache dir honours ${CACHE_ENV}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=common, help="accuracy of a container on a split")
    p.add_argument("container")
    p.add_argument("csv")
    p.add_argument("--split", help="split manifest file (default: recompute from --seed)")
    p.add_argument("--subset", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", parents=common, help="8-bit quantize a trained head")
    p.add_argument("head")
    p.add_argument("--out")
    p.add_argument("--csv", help="also compare validation accuracy on this dataset")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("pack", parents=common, help="write a model container")
    p.add_argument("head")
    p.add_argument("--out", default="model.slr")
    p.add_argument("--quantize", action="store_true", help="store the head as quant8")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("inspect", parents=common, help="validate a container")
    p.add_argument("container")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", parents=common, help="FLOPs, fps and latency")
    p.add_argument("--device-gflops", type=float, default=10.0)
    p.add_argument("--model-gflops", type=float)
    p.add_argument("--model", help="container to benchmark")
    p.add_argument("--backbone", default="desk")
    p.add_argument("--labels", type=int, default=24)
    p.add_argument("--csv", help="images for latency runs")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--report", help="write the benchmark JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("infer", parents=common, help="top-k prediction for one image")
    p.add_argument("container")
    p.add_argument("--image")
    p.add_argument("--csv")
    p.add_argument("--row", type=int)
    p.add_argument("-k", type=int, default=3)
    p.set_defaults(func=cmd_infer)
    return parser


def resolve_options(args) -> None:
    """Fill unset options from --config, then from the built-in defaults."""
    config = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(config, dict):
            raise InputError(f"config {args.config} must hold a JSON object")
    for key, default in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, config.get(key, default))
    for key in ("seed", "normalization"):
        if getattr(args, key, None) is None:
            setattr(args, key, config.get(key, DEFAULTS[key]))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        resolve_options(args)
        return args.func(args)
    except (InputError, DatasetError, ContainerError, FileNotFoundError, IsADirectoryError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

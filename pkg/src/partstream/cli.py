"""Command-line entry point: data synthesis, training, evaluation, model
accounting, and gradient checking.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All machine-readable output is JSON; the effective configuration is echoed
into every artifact.
"""

import argparse
import json
import os
import sys

from .data import LoadError, SynthSpec, load_manifest, synth_dataset
from .gradcheck import run_suite
from .model import (
    ModelConfig, StreamConfig, build_model, config_hash, count_flops,
    count_params, load_checkpoint, restore_stream,
)
from .modalities import ModalitySelection
from .skeleton import TOPOLOGY_NAMES
from .tensor import ConfigError
from .training import (
    TrainConfig, evaluate, evaluate_partial, train_stream,
)

__all__ = ["main", "UsageError", "load_run_config"]


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


CONFIG_VERSION = 1
_TOP_KEYS = {
    "version", "topology", "num_classes", "window", "seed", "manifest",
    "streams", "fusion_weights", "fusion_mode", "attention_mode", "squash",
    "disjoint_parts", "modalities", "channels", "train",
}
_CHANNEL_KEYS = {"depth", "widths", "strides"}
_TRAIN_KEYS = {
    "base_lr", "weight_decay", "momentum", "batch_size", "epochs",
    "milestones", "lr_decay", "warmup_epochs", "seed", "val_fraction",
    "partial_pad", "stop_train_acc", "stop_val_acc",
}


def _reject_unknown(d, allowed, where):
    unknown = set(d) - allowed
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_run_config(path, overrides=None):
    """Parse a JSON run config into (ModelConfig, TrainConfig, manifest_path, dict).

    Unknown keys are rejected to catch typos; command-line overrides replace
    file values. The returned dict is the effective configuration for
    echoing into artifacts.
    """
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    if raw.get("version") != CONFIG_VERSION:
        raise UsageError(f"config {path} must declare \"version\": {CONFIG_VERSION}")
    for part, spec in (raw.get("channels") or {}).items():
        if part not in ("body", "hands", "legs"):
            raise UsageError(f"unknown stream {part!r} in channels")
        _reject_unknown(spec, _CHANNEL_KEYS, f"channels.{part}")
    _reject_unknown(raw.get("train") or {}, _TRAIN_KEYS, "train")

    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key in ("epochs", "batch_size", "base_lr"):
            raw.setdefault("train", {})[key] = val
        else:
            raw[key] = val

    topology = raw.get("topology", "ntu25")
    if topology not in TOPOLOGY_NAMES:
        raise UsageError(f"unknown topology {topology!r}")
    num_classes = raw.get("num_classes", 8)
    modalities = ModalitySelection.from_names(
        raw.get("modalities", list(ModalitySelection().names())))
    parts = raw.get("streams")
    channels = raw.get("channels") or {}
    try:
        streams = None
        if parts is not None:
            streams = []
            for part in parts:
                extra = channels.get(part, {})
                streams.append(StreamConfig(
                    part=part, num_classes=num_classes,
                    depth=extra.get("depth", 0), widths=extra.get("widths"),
                    strides=extra.get("strides"), modalities=modalities))
        model_cfg = ModelConfig(
            topology=topology, num_classes=num_classes, streams=streams,
            fusion_weights=raw.get("fusion_weights"),
            window=raw.get("window", 64), seed=raw.get("seed", 0),
            fusion_mode=raw.get("fusion_mode", "prob"),
            attention_mode=raw.get("attention_mode", "channelwise"),
            squash=raw.get("squash", "tanh"),
            disjoint_parts=raw.get("disjoint_parts", False))
        if streams is None and modalities != ModalitySelection():
            for s in model_cfg.streams:
                s.modalities = modalities
        train_cfg = TrainConfig(**{**{"seed": raw.get("seed", 0)},
                                   **(raw.get("train") or {})})
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc

    manifest_path = raw.get("manifest")
    if manifest_path is not None and not os.path.isabs(manifest_path):
        manifest_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                                     manifest_path)
    effective = {"version": CONFIG_VERSION, "model": model_cfg.to_dict(),
                 "train": train_cfg.to_dict(), "manifest": manifest_path}
    return model_cfg, train_cfg, manifest_path, effective


def _parse_floats(text, flag):
    try:
        values = [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"{flag} expects a comma-separated float list, got {text!r}") from exc
    if not values:
        raise UsageError(f"{flag} expects at least one value")
    return values


def _emit(payload, out_path):
    text = json.dumps(payload, indent=1, sort_keys=True)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    try:
        spec = SynthSpec(topology=args.topology, num_classes=args.classes,
                         train_per_class=args.samples,
                         val_per_class=args.val_samples, frames=args.frames)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    manifest, path = synth_dataset(spec, args.seed, args.out)
    summary = {"manifest": path, "topology": manifest.topology,
               "classes": manifest.num_classes,
               "sequences": {s: len(manifest.split(s)) for s in manifest.splits()},
               "seed": args.seed}
    _emit(summary, None)
    return 0


def _require_manifest(manifest_path):
    if manifest_path is None:
        raise UsageError("config does not name a manifest")
    if not os.path.isfile(manifest_path):
        raise UsageError(f"manifest not found: {manifest_path}")
    return load_manifest(manifest_path)


def cmd_train(args):
    model_cfg, train_cfg, manifest_path, effective = load_run_config(
        args.config, {"seed": args.seed, "epochs": args.epochs,
                      "batch_size": args.batch_size, "base_lr": args.lr})
    manifest = _require_manifest(manifest_path)
    parts = model_cfg.parts if args.stream == "all" else [args.stream]
    for part in parts:
        if part not in model_cfg.parts:
            raise UsageError(f"stream {part!r} is not configured "
                             f"(config has {', '.join(model_cfg.parts)})")
    os.makedirs(args.out, exist_ok=True)
    own_hash = config_hash(model_cfg.to_dict())
    for part in parts:
        ckpt_path = os.path.join(args.out, f"{part}.ckpt")
        if os.path.exists(ckpt_path):
            header, _ = load_checkpoint(ckpt_path)
            if header["config_hash"] != own_hash:
                raise UsageError(
                    f"{ckpt_path} was trained with a different config "
                    f"(hash {header['config_hash'][:12]} vs {own_hash[:12]}); "
                    "refusing to overwrite")
    model = build_model(model_cfg)
    results = {}
    for part in parts:
        log, _ = train_stream(
            model, part, manifest, train_cfg,
            log_path=os.path.join(args.out, f"{part}_log.jsonl"),
            checkpoint_path=os.path.join(args.out, f"{part}.ckpt"))
        best_val = max((r["val_acc"] or 0.0) for r in log)
        results[part] = {"epochs": len(log), "best_val_acc": best_val,
                         "final_train_acc": log[-1]["train_acc"]}
    _emit({"config": effective, "trained": results, "out": args.out}, None)
    return 0


def _restore_all(model, checkpoint_paths):
    restored = []
    for path in checkpoint_paths:
        if not os.path.isfile(path):
            raise UsageError(f"checkpoint not found: {path}")
        header = restore_stream(model, path)
        restored.append(header["part"])
    return restored


def cmd_eval(args):
    model_cfg, train_cfg, manifest_path, effective = load_run_config(args.config, {})
    manifest = _require_manifest(manifest_path)
    model = build_model(model_cfg)
    restored = _restore_all(model, args.checkpoints)
    weights = {p: model_cfg.weight_of(p) for p in model_cfg.parts}
    if args.fusion_weights:
        values = _parse_floats(args.fusion_weights, "--fusion-weights")
        if len(values) != len(model_cfg.parts):
            raise UsageError(f"--fusion-weights needs {len(model_cfg.parts)} values "
                             f"for streams {', '.join(model_cfg.parts)}")
        weights = dict(zip(model_cfg.parts, values))
    for part, w in weights.items():
        if w > 0 and part not in restored:
            raise UsageError(f"stream {part!r} has weight {w} but no checkpoint "
                             "was given for it")
    weights = {p: w for p, w in weights.items() if p in restored}
    report = evaluate(model, manifest, split=args.split, weights=weights,
                      parts=restored)
    payload = {"config": effective, "split": args.split,
               "report": report.to_dict()}
    if args.partial:
        fractions = _parse_floats(args.partial, "--partial")
        try:
            payload["partial"] = evaluate_partial(
                model, manifest, fractions, split=args.split, weights=weights,
                parts=restored, pad_mode=train_cfg.partial_pad)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    _emit(payload, args.out)
    return 0


def cmd_info(args):
    model_cfg, _, _, effective = load_run_config(args.config, {})
    model = build_model(model_cfg)
    payload = {"config": effective,
               "params": count_params(model),
               "flops_at_window": count_flops(model),
               "window": model_cfg.window}
    _emit(payload, None)
    return 0


def cmd_gradcheck(args):
    groups = {"all": ("ops", "mmdg", "samg", "trm", "strb", "stream"),
              "samg": ("samg",), "trm": ("trm",), "strb": ("strb",),
              "mmdg": ("mmdg",)}
    reports = run_suite(groups[args.module], seeds=args.seeds,
                        base_seed=args.seed)
    failures = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failures)}/{len(reports)} checks passed")
    if failures:
        raise RuntimeError(f"{len(failures)} gradient check(s) failed")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="partstream",
        description="Part-stream skeleton action recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic part-dominant dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--samples", type=int, default=16, help="training samples per class")
    p.add_argument("--val-samples", type=int, default=8, help="validation samples per class")
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--topology", default="ntu25", choices=TOPOLOGY_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one or all part streams")
    p.add_argument("--config", required=True)
    p.add_argument("--stream", default="all",
                   choices=("body", "hands", "legs", "all"))
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints with late fusion")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--fusion-weights", default=None,
                   help="comma-separated weights, one per configured stream")
    p.add_argument("--partial", default=None,
                   help="comma-separated observed fractions, e.g. 0.2,0.4,1.0")
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("info", help="parameter and FLOP accounting")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_info)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference suite")
    p.add_argument("--module", default="all",
                   choices=("all", "samg", "trm", "strb", "mmdg"))
    p.add_argument("--seeds", type=int, default=20, help="seeds per check")
    p.add_argument("--seed", type=int, default=0, help="first seed of the range")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.fn(args)
    except (UsageError, ConfigError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

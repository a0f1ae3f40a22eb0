"""Per-stream training loops, evaluation reports, early-action analysis,
and the ablation driver.

Streams share no state, so they are trained independently; the evaluation
side fuses their probability vectors with configurable weights. All
randomness (shuffling, initialization) derives from the configured seeds, so
a fixed (seed, config) pair reproduces checkpoints bit for bit at a fixed
thread count.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (
    factorize_parts, load_manifest, load_sequence, normalize_sequence,
    person_active,
)
from .modalities import assemble
from .model import fuse, save_checkpoint
from .nn import SGD
from .tensor import ConfigError, Tensor, cross_entropy

__all__ = [
    "TrainConfig", "EvalReport", "lr_for_epoch", "prepare_part",
    "split_items", "train_stream", "evaluate", "evaluate_partial",
    "ablation_run", "ablation_table_csv", "write_jsonl",
]

_STREAM_IDS = {"body": 0, "hands": 1, "legs": 2}


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 50
    milestones: list = None      # epoch indices; default 60% and 80% of epochs
    lr_decay: float = 0.1
    warmup_epochs: int = 5
    seed: int = 0
    val_fraction: float = 0.2
    partial_pad: str = "loop"    # how truncated clips are padded back to W
    stop_train_acc: float = None
    stop_val_acc: float = None

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.milestones is None:
            self.milestones = sorted({int(self.epochs * 0.6), int(self.epochs * 0.8)})
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if self.partial_pad not in ("loop", "zero"):
            raise ConfigError(f"unknown partial_pad {self.partial_pad!r}")

    def to_dict(self):
        return {"base_lr": self.base_lr, "weight_decay": self.weight_decay,
                "momentum": self.momentum, "batch_size": self.batch_size,
                "epochs": self.epochs, "milestones": list(self.milestones),
                "lr_decay": self.lr_decay, "warmup_epochs": self.warmup_epochs,
                "seed": self.seed, "val_fraction": self.val_fraction,
                "partial_pad": self.partial_pad,
                "stop_train_acc": self.stop_train_acc,
                "stop_val_acc": self.stop_val_acc}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_for_epoch(cfg, epoch):
    """Linear warmup to base_lr, then step decay at the milestones."""
    if cfg.warmup_epochs and epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    drops = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.base_lr * cfg.lr_decay ** drops


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PreparedPart:
    """Model-ready arrays for one part stream over one split."""

    x: np.ndarray        # [n, Cmod, W, Np, M] float32
    labels: np.ndarray   # [n] int
    mask: np.ndarray     # [n, M] person activity

    def __len__(self):
        return len(self.labels)

    def folded(self):
        """Flatten active persons into rows: (rows[R,C,W,Np], labels[R], sample[R])."""
        n, c, w, np_, m = self.x.shape
        rows, labels, samples = [], [], []
        for i in range(n):
            for p in np.flatnonzero(self.mask[i]):
                rows.append(self.x[i, :, :, :, p])
                labels.append(self.labels[i])
                samples.append(i)
        return np.stack(rows), np.asarray(labels), np.asarray(samples)


def split_items(manifest, split, val_fraction=0.2):
    """Items of a named split; a missing 'val' split is carved out of 'train'.

    The carve-out is stratified per class and deterministic (sorted by path,
    last rows go to validation).
    """
    have = set(manifest.splits())
    if split in have:
        return manifest.split(split)
    if split != "val" or "train" not in have:
        raise ConfigError(f"manifest has no {split!r} split (found {sorted(have)})")
    val = []
    items = sorted(manifest.split("train"), key=lambda it: it.path)
    for label in sorted({it.label for it in items}):
        rows = [it for it in items if it.label == label]
        k = min(int(round(len(rows) * val_fraction)), len(rows) - 1)
        val.extend(rows[len(rows) - k:])
    return val


def _train_items(manifest, val_fraction):
    items = manifest.split("train")
    if "val" in manifest.splits():
        return items
    carved = {id(it) for it in split_items(manifest, "val", val_fraction)}
    ordered = sorted(items, key=lambda it: it.path)
    return [it for it in ordered if id(it) not in carved]


def prepare_part(manifest, model, part, items, fraction=None, pad_mode="loop"):
    """Load, truncate, normalize, window, factorize and assemble one part."""
    if not items:
        raise ConfigError("empty item list for dataset preparation")
    if manifest.topology != model.cfg.topology:
        raise ConfigError(f"manifest topology {manifest.topology!r} does not match "
                          f"model topology {model.cfg.topology!r}")
    if manifest.num_classes > model.cfg.num_classes:
        raise ConfigError(f"manifest has {manifest.num_classes} classes, model "
                          f"expects {model.cfg.num_classes}")
    scfg = model.cfg.stream(part)
    sub = model.streams[part].subgraph
    window = model.cfg.window
    xs, labels, masks = [], [], []
    max_m = 1
    for it in items:
        seq = load_sequence(it.path, model.topology)
        if fraction is not None:
            keep = math.ceil(fraction * seq.frames)
            if keep < 2:
                raise ConfigError(f"fraction {fraction} keeps {keep} frame(s) of "
                                  f"{seq.frames}; need at least 2")
            seq.coords = seq.coords[:, :keep]
        masks.append(person_active(seq.coords))
        seq = normalize_sequence(seq, model.topology, window=window, pad_mode=pad_mode)
        part_seq = factorize_parts(seq, model.part_spec)[part]
        with T.no_grad():
            feats = assemble(Tensor(part_seq.coords), sub.parent, scfg.modalities).data
        xs.append(feats.astype(np.float32))
        labels.append(it.label)
        max_m = max(max_m, feats.shape[3])
    n = len(xs)
    c, w, np_ = xs[0].shape[:3]
    x = np.zeros((n, c, w, np_, max_m), dtype=np.float32)
    mask = np.zeros((n, max_m), dtype=bool)
    for i, (feats, act) in enumerate(zip(xs, masks)):
        x[i, :, :, :, :feats.shape[3]] = feats
        mask[i, :len(act)] = act
    return PreparedPart(x=x, labels=np.asarray(labels), mask=mask)


# ---------------------------------------------------------------------------
# training


def train_stream(model, part, manifest, cfg, log_path=None, checkpoint_path=None):
    """Train one stream; returns (log records, best state arrays).

    Keeps the best-validation-accuracy parameters, restores them into the
    model at the end, and optionally writes the JSONL log and a checkpoint.
    """
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    if part not in model.streams:
        raise ConfigError(f"model has no {part!r} stream")
    train_items = _train_items(manifest, cfg.val_fraction)
    if not train_items:
        raise ConfigError("empty training split")
    val_items = split_items(manifest, "val", cfg.val_fraction)
    train_data = prepare_part(manifest, model, part, train_items)
    val_data = prepare_part(manifest, model, part, val_items) if val_items else None

    net = model.streams[part]
    opt = SGD(net.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    rows, row_labels, _ = train_data.folded()
    n_rows = len(row_labels)
    log = []
    best = (-1.0, None)
    for epoch in range(cfg.epochs):
        opt.lr = lr_for_epoch(cfg, epoch)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [cfg.seed, _STREAM_IDS[part], 31, epoch])))
        order = rng.permutation(n_rows)
        net.train()
        total_loss, correct = 0.0, 0
        for start in range(0, n_rows, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = Tensor(rows[idx])
            yb = row_labels[idx]
            logits = net(xb)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} (lr={opt.lr:g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        train_loss = total_loss / n_rows
        train_acc = correct / n_rows

        net.eval()
        val_acc = None
        if val_data is not None:
            probs = _stream_scores(model, part, val_data)["probs"]
            val_acc = float((probs.argmax(axis=1) == val_data.labels).mean())
            if val_acc > best[0]:
                best = (val_acc, net.state_arrays())
        log.append({"epoch": epoch, "lr": opt.lr, "loss": train_loss,
                    "train_acc": train_acc, "val_acc": val_acc})
        stop_train = cfg.stop_train_acc is None or train_acc >= cfg.stop_train_acc
        stop_val = cfg.stop_val_acc is None or (val_acc or 0.0) >= cfg.stop_val_acc
        if (cfg.stop_train_acc is not None or cfg.stop_val_acc is not None) \
                and stop_train and stop_val:
            break

    if best[1] is not None:
        net.load_state_arrays(best[1])
    net.eval()
    if log_path:
        write_jsonl(log_path, log)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, part,
                        extra={"train": cfg.to_dict(), "epochs_run": len(log)})
    return log, best[1]


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    top1: float
    per_class: list
    confusion: list
    per_stream: dict
    fused_top1: float
    num_samples: int
    weights: dict = field(default_factory=dict)

    def to_dict(self):
        return {"top1": self.top1, "per_class": self.per_class,
                "confusion": self.confusion, "per_stream": self.per_stream,
                "fused_top1": self.fused_top1, "num_samples": self.num_samples,
                "weights": self.weights}


def _stream_scores(model, part, data):
    """Person-averaged probabilities and logits for a prepared part split."""
    rows, _, samples = data.folded()
    k = model.cfg.num_classes
    bs = 64
    logits = np.empty((len(rows), k), dtype=np.float64)
    for start in range(0, len(rows), bs):
        logits[start:start + bs] = model.stream_logits(part, rows[start:start + bs])
    with T.no_grad():
        probs_rows = T.softmax(Tensor(logits), axis=-1).data
    n = len(data)
    probs = np.zeros((n, k))
    avg_logits = np.zeros((n, k))
    counts = np.zeros(n)
    for r, s in enumerate(samples):
        probs[s] += probs_rows[r]
        avg_logits[s] += logits[r]
        counts[s] += 1
    counts = np.maximum(counts, 1)
    return {"probs": probs / counts[:, None], "logits": avg_logits / counts[:, None]}


def evaluate(model, manifest, split="val", weights=None, parts=None,
             prepared=None, fraction=None, pad_mode="loop"):
    """Accuracy report over one split with weighted late fusion.

    `weights` maps part -> weight (defaults to the model config); streams
    with zero weight still get a per-stream accuracy entry.
    """
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    parts = list(parts) if parts is not None else model.parts
    if weights is None:
        weights = {p: model.cfg.weight_of(p) for p in parts}
    unknown = set(weights) - set(model.parts)
    if unknown:
        raise ConfigError(f"weights reference unknown streams: {sorted(unknown)}")
    model.eval()
    items = split_items(manifest, split)
    if not items:
        raise ConfigError(f"split {split!r} is empty")
    labels = np.asarray([it.label for it in items])
    k = model.cfg.num_classes

    scores, per_stream = {}, {}
    for part in parts:
        data = (prepared[part] if prepared is not None else
                prepare_part(manifest, model, part, items, fraction=fraction,
                             pad_mode=pad_mode))
        scores[part] = _stream_scores(model, part, data)
        per_stream[part] = float(
            (scores[part]["probs"].argmax(axis=1) == labels).mean())

    wvec = [weights.get(p, 0.0) for p in parts]
    if model.cfg.fusion_mode == "logit":
        fused_logits = fuse([scores[p]["logits"] for p in parts], wvec)
        with T.no_grad():
            fused = T.softmax(Tensor(fused_logits), axis=-1).data
    else:
        fused = fuse([scores[p]["probs"] for p in parts], wvec)

    pred = fused.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, pred):
        confusion[t, p] += 1
    row_sums = confusion.sum(axis=1)
    per_class = np.where(row_sums > 0, np.diag(confusion) / np.maximum(row_sums, 1), 0.0)
    top1 = float(np.trace(confusion) / len(labels))
    return EvalReport(top1=top1, per_class=[float(v) for v in per_class],
                      confusion=confusion.tolist(), per_stream=per_stream,
                      fused_top1=top1, num_samples=len(labels),
                      weights={p: float(w) for p, w in zip(parts, wvec)})


def evaluate_partial(model, manifest, fractions, split="val", weights=None,
                     parts=None, pad_mode="loop"):
    """Accuracy at each observed fraction of the sequences (early action).

    Clips are truncated to the first ceil(p*T) frames before normalization
    and windowing; p = 1.0 reproduces the plain evaluation exactly.
    """
    rows = []
    for p in fractions:
        if not 0 < p <= 1:
            raise ConfigError(f"fractions must lie in (0, 1], got {p}")
        report = evaluate(model, manifest, split=split, weights=weights,
                          parts=parts, fraction=p, pad_mode=pad_mode)
        rows.append({"fraction": float(p), "top1": report.top1,
                     "per_stream": report.per_stream})
    return rows


# ---------------------------------------------------------------------------
# ablations


def default_ablation_rows():
    rows = [{"kind": "streams", "parts": list(c)} for c in
            (("body",), ("hands",), ("legs",), ("body", "hands"),
             ("body", "legs"), ("hands", "legs"), ("body", "hands", "legs"))]
    rows.append({"kind": "disjoint"})
    rows += [{"kind": "modality", "modalities": [m]} for m in
             ("joint", "bone", "joint_vel", "bone_vel")]
    rows.append({"kind": "modality", "modalities": ["joint", "bone"]})
    return rows


def ablation_run(manifest, model_cfg, train_cfg, rows=None, split="val",
                 build_fn=None):
    """Train/evaluate the requested configuration grid; returns table rows.

    Stream-subset rows share one set of trained streams; disjoint-parts and
    modality rows each train their own variant. `build_fn(cfg)` may be
    supplied to intercept model construction (tests use reduced configs).
    """
    from .model import ModelConfig, build_model, count_params
    from .modalities import ModalitySelection

    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    rows = rows if rows is not None else default_ablation_rows()
    build = build_fn or build_model
    cache = {}

    def trained_model(key, cfg, parts):
        if key not in cache:
            m = build(cfg)
            for part in parts:
                if part in m.streams:
                    train_stream(m, part, manifest, train_cfg)
            cache[key] = m
        return cache[key]

    out = []
    for row in rows:
        if row["kind"] == "streams":
            parts = [p for p in row["parts"]]
            m = trained_model("base", model_cfg, model_cfg.parts)
            weights = {p: model_cfg.weight_of(p) if p in parts else 0.0
                       for p in model_cfg.parts}
            report = evaluate(m, manifest, split=split, weights=weights)
            params = sum(count_params(m)[p] for p in parts)
            label = "+".join(parts)
        elif row["kind"] == "disjoint":
            cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "disjoint_parts": True})
            m = trained_model("disjoint", cfg, cfg.parts)
            report = evaluate(m, manifest, split=split)
            params = count_params(m)["total"]
            label = "disjoint"
        elif row["kind"] == "modality":
            names = row["modalities"]
            sel = ModalitySelection.from_names(names)
            base = model_cfg.to_dict()
            for s in base["streams"]:
                s["modalities"] = list(names)
            cfg = ModelConfig.from_dict(base)
            m = trained_model("modality:" + "+".join(names), cfg, cfg.parts)
            report = evaluate(m, manifest, split=split)
            params = count_params(m)["total"]
            label = "modality:" + "+".join(names)
        else:
            raise ConfigError(f"unknown ablation row kind {row['kind']!r}")
        out.append({"config": label, "params": int(params),
                    "top1": float(report.top1)})
    return out


def ablation_table_csv(rows):
    lines = ["config,params,top1"]
    for row in rows:
        lines.append(f"{row['config']},{row['params']},{row['top1']:.4f}")
    return "\n".join(lines) + "\n"

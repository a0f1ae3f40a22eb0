"""Part-stream model assembly, late fusion, accounting, and checkpoints.

A model is one independent trunk per configured part group (body/hands/legs),
each consuming the unified modality tensor for its joint subset. Streams
never share parameters; the final prediction is a weighted average of the
per-stream class probability vectors.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import DEFAULT_BRANCHES, SpatioTemporalBlock
from .modalities import ModalitySelection
from .nn import BatchNorm2d, Linear, Module, ModuleList
from .skeleton import (
    PARTS, build_adjacency, disjoint_part_spec, get_part_spec, get_topology,
    part_subgraph,
)
from .tensor import ConfigError, Tensor

__all__ = [
    "StreamConfig", "ModelConfig", "StreamNet", "PartStreamModel",
    "build_model", "default_model_config", "fuse", "count_params",
    "count_flops", "save_checkpoint", "load_checkpoint", "restore_stream",
    "config_hash", "DEFAULT_DEPTHS", "DEFAULT_WIDTHS", "DEFAULT_STRIDES",
    "DEFAULT_FUSION_WEIGHTS",
]

# Stream depth is proportional to joint count; widths were sized so the
# default ntu25 model lands on the published per-stream parameter budget
# (body ~1.4M, hands ~0.9M, legs ~0.5M).
DEFAULT_DEPTHS = {"body": 10, "hands": 6, "legs": 4}
DEFAULT_WIDTHS = {
    "body": [80, 80, 80, 80, 160, 160, 160, 320, 320, 320],
    "hands": [80, 80, 160, 160, 320, 320],
    "legs": [64, 128, 256, 256],
}
DEFAULT_STRIDES = {
    "body": [1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
    "hands": [1, 1, 2, 1, 2, 1],
    "legs": [1, 2, 2, 1],
}
DEFAULT_FUSION_WEIGHTS = {"body": 1.0, "hands": 1.0, "legs": 0.5}
_STREAM_IDS = {"body": 0, "hands": 1, "legs": 2}


@dataclass
class StreamConfig:
    """Trunk layout for one part stream."""

    part: str
    num_classes: int
    depth: int = 0
    widths: list = None
    strides: list = None
    modalities: ModalitySelection = field(default_factory=ModalitySelection)

    def __post_init__(self):
        if self.part not in PARTS:
            raise ConfigError(f"unknown part {self.part!r}")
        if self.depth == 0:
            self.depth = DEFAULT_DEPTHS[self.part]
        if self.widths is None:
            self.widths = (list(DEFAULT_WIDTHS[self.part])
                           if self.depth == DEFAULT_DEPTHS[self.part] else None)
        if self.strides is None:
            self.strides = (list(DEFAULT_STRIDES[self.part])
                            if self.depth == DEFAULT_DEPTHS[self.part] else None)
        if self.widths is None or self.strides is None:
            raise ConfigError(
                f"{self.part}: widths/strides must be given for non-default depth {self.depth}")
        if len(self.widths) != self.depth or len(self.strides) != self.depth:
            raise ConfigError(
                f"{self.part}: depth {self.depth} does not match widths "
                f"({len(self.widths)}) / strides ({len(self.strides)})")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"{self.part}: strides must be 1 or 2")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    def to_dict(self):
        return {"part": self.part, "num_classes": self.num_classes,
                "depth": self.depth, "widths": list(self.widths),
                "strides": list(self.strides),
                "modalities": self.modalities.names()}

    @classmethod
    def from_dict(cls, d):
        return cls(part=d["part"], num_classes=d["num_classes"],
                   depth=d.get("depth", 0), widths=d.get("widths"),
                   strides=d.get("strides"),
                   modalities=ModalitySelection.from_names(
                       d.get("modalities", list(ModalitySelection().names()))))


@dataclass
class ModelConfig:
    topology: str = "ntu25"
    num_classes: int = 8
    streams: list = None
    fusion_weights: list = None
    window: int = 64
    seed: int = 0
    fusion_mode: str = "prob"          # "prob" | "logit"
    attention_mode: str = "channelwise"  # "channelwise" | "shared"
    squash: str = "tanh"               # "tanh" | "conv"
    disjoint_parts: bool = False

    def __post_init__(self):
        spec = (disjoint_part_spec(self.topology) if self.disjoint_parts
                else get_part_spec(self.topology))
        if self.streams is None:
            self.streams = [StreamConfig(part=p, num_classes=self.num_classes)
                            for p in spec.active_parts()]
        parts = [s.part for s in self.streams]
        if len(set(parts)) != len(parts):
            raise ConfigError("streams must reference distinct parts")
        for s in self.streams:
            if s.num_classes != self.num_classes:
                raise ConfigError("stream num_classes disagrees with model")
            if not spec.group(s.part):
                raise ConfigError(f"part group {s.part!r} is empty for topology "
                                  f"{self.topology!r}; cannot configure a stream on it")
        if self.fusion_weights is None:
            self.fusion_weights = [DEFAULT_FUSION_WEIGHTS[p] for p in parts]
        if len(self.fusion_weights) != len(self.streams):
            raise ConfigError("one fusion weight per stream required")
        if any(w < 0 for w in self.fusion_weights):
            raise ConfigError("fusion weights must be nonnegative")
        if not any(w > 0 for w in self.fusion_weights):
            raise ConfigError("fusion weights must not all be zero")
        if self.fusion_mode not in ("prob", "logit"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.attention_mode not in ("channelwise", "shared"):
            raise ConfigError(f"unknown attention mode {self.attention_mode!r}")
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")

    @property
    def parts(self):
        return [s.part for s in self.streams]

    def stream(self, part):
        for s in self.streams:
            if s.part == part:
                return s
        raise KeyError(part)

    def weight_of(self, part):
        return self.fusion_weights[self.parts.index(part)]

    def to_dict(self):
        return {"topology": self.topology, "num_classes": self.num_classes,
                "streams": [s.to_dict() for s in self.streams],
                "fusion_weights": list(self.fusion_weights),
                "window": self.window, "seed": self.seed,
                "fusion_mode": self.fusion_mode,
                "attention_mode": self.attention_mode, "squash": self.squash,
                "disjoint_parts": self.disjoint_parts}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("streams") is not None:
            d["streams"] = [StreamConfig.from_dict(s) for s in d["streams"]]
        return cls(**d)


def default_model_config(topology="ntu25", num_classes=8, **kwargs):
    return ModelConfig(topology=topology, num_classes=num_classes, **kwargs)


class StreamNet(Module):
    """One part stream: input norm, stacked blocks, pooling, classifier."""

    def __init__(self, cfg, subgraph, adjacency, rng, channelwise=True,
                 squash="tanh", dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.subgraph = subgraph
        cmod = cfg.modalities.channels()
        self.input_bn = BatchNorm2d(cmod, dtype=dtype)
        blocks = []
        cin = cmod
        for width, stride in zip(cfg.widths, cfg.strides):
            blocks.append(SpatioTemporalBlock(
                cin, width, stride, adjacency, rng, branches=DEFAULT_BRANCHES,
                channelwise=channelwise, squash=squash, dtype=dtype))
            cin = width
        self.blocks = ModuleList(blocks)
        self.fc = Linear(cin, cfg.num_classes, rng, dtype=dtype)
        self.dtype = dtype

    def forward(self, x):
        """[B, Cmod, T, N] -> logits [B, K]."""
        h = self.input_bn(x)
        for block in self.blocks:
            h = block(h)
        return self.fc(T.global_avg_pool(h))

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def flops(self, window):
        n = self.subgraph.num_joints
        t = window
        macs = 0
        for block in self.blocks:
            m, t = block.flops(t, n)
            macs += m
        return macs + self.fc.flops()


class PartStreamModel(Module):
    """All configured streams plus the fusion rule."""

    def __init__(self, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.topology = get_topology(cfg.topology)
        self.part_spec = (disjoint_part_spec(cfg.topology) if cfg.disjoint_parts
                          else get_part_spec(cfg.topology))
        self.streams = {}
        for scfg in cfg.streams:
            sub = part_subgraph(self.topology, self.part_spec.group(scfg.part),
                                name=scfg.part)
            adj = build_adjacency(sub, allow_disconnected=self.part_spec.allow_disconnected)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                [cfg.seed, _STREAM_IDS[scfg.part]])))
            net = StreamNet(scfg, sub, adj, rng,
                            channelwise=cfg.attention_mode == "channelwise",
                            squash=cfg.squash, dtype=dtype)
            setattr(self, scfg.part, net)
            self.streams[scfg.part] = net

    @property
    def parts(self):
        return list(self.streams)

    def stream_logits(self, part, x):
        """Numpy [B,Cmod,T,N] -> numpy logits [B,K], no graph construction."""
        with T.no_grad():
            return self.streams[part](Tensor(np.asarray(x, dtype=self.dtype))).data

    def stream_probs(self, part, x, person_mask=None):
        """Class probabilities for one stream.

        x: [B, Cmod, T, N, M] (or [B,Cmod,T,N] for a single person);
        person_mask: [B, M] activity flags. Probabilities are averaged over
        the active persons of each sample.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x[..., None]
        b, c, t, n, m = x.shape
        folded = x.transpose(0, 4, 1, 2, 3).reshape(b * m, c, t, n)
        logits = self.stream_logits(part, folded)
        with T.no_grad():
            probs = T.softmax(Tensor(logits), axis=-1).data
        probs = probs.reshape(b, m, -1)
        if person_mask is None:
            person_mask = np.ones((b, m), dtype=bool)
        mask = np.asarray(person_mask, dtype=np.float64)
        mask = np.where(mask.sum(axis=1, keepdims=True) > 0, mask, 1.0)
        return (probs * mask[:, :, None]).sum(axis=1) / mask.sum(axis=1)[:, None]


def build_model(cfg, dtype=np.float32):
    """Instantiate all streams with seeded, order-deterministic initialization."""
    return PartStreamModel(cfg, dtype=dtype)


def fuse(scores, weights):
    """Weighted average of per-stream score rows: sum(w_i s_i) / sum(w_i)."""
    if isinstance(scores, dict):
        scores = list(scores.values())
    weights = list(weights)
    if len(weights) != len(scores):
        raise ConfigError(f"{len(scores)} score sets but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ConfigError("fusion weights must be nonnegative")
    total = float(sum(weights))
    if total <= 0:
        raise ConfigError("fusion weights must not all be zero")
    out = np.zeros_like(np.asarray(scores[0], dtype=np.float64))
    for s, w in zip(scores, weights):
        out += (w / total) * np.asarray(s, dtype=np.float64)
    return out


def count_params(model):
    """Exact per-stream and total parameter counts."""
    counts = {part: net.param_count() for part, net in model.streams.items()}
    counts["total"] = sum(counts.values())
    return counts


def count_flops(model, window=None):
    """Analytic multiply-add counts per sample and person at window length W."""
    w = window if window is not None else model.cfg.window
    counts = {part: net.flops(w) for part, net in model.streams.items()}
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line + named float32 blobs


CKPT_FORMAT = "pscp"
CKPT_VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg_dict):
    return hashlib.sha256(canonical_json(cfg_dict).encode("utf-8")).hexdigest()


def save_checkpoint(path, model, part, extra=None):
    """Write one stream's parameters and buffers with a name->offset index."""
    state = model.streams[part].state_arrays()
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        index.append({"name": f"{part}.{name}", "shape": list(arr.shape),
                      "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    cfg_dict = model.cfg.to_dict()
    header = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "part": part,
              "config": cfg_dict, "config_hash": config_hash(cfg_dict),
              "index": index}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(canonical_json(header).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read (header, {name: array}) from a checkpoint file."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: not a checkpoint file ({exc})") from exc
        if header.get("format") != CKPT_FORMAT or header.get("version") != CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint format/version")
        raw = fh.read()
    state = {}
    for entry in header["index"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        start = entry["offset"]
        arr = np.frombuffer(raw[start:start + nbytes], dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ConfigError(f"{path}: truncated blob for {entry['name']}")
        state[entry["name"]] = arr.reshape(shape).copy()
    return header, state


def restore_stream(model, path, expect_part=None):
    """Load a checkpoint into the matching stream; config must match exactly."""
    header, state = load_checkpoint(path)
    part = header["part"]
    if expect_part is not None and part != expect_part:
        raise ConfigError(f"{path}: checkpoint is for {part!r}, expected {expect_part!r}")
    if part not in model.streams:
        raise ConfigError(f"{path}: model has no {part!r} stream")
    own = model.cfg.to_dict()
    if config_hash(own) != header["config_hash"]:
        raise ConfigError(f"{path}: checkpoint config does not match the model "
                          f"(hash {header['config_hash'][:12]} vs {config_hash(own)[:12]})")
    prefix = f"{part}."
    local = {name[len(prefix):]: arr for name, arr in state.items()
             if name.startswith(prefix)}
    model.streams[part].load_state_arrays(local)
    return header

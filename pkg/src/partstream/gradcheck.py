"""Finite-difference verification of every differentiable op and block.

All checks run at float64 with central differences; op checks sweep
randomized small shapes over many seeds, block checks probe every parameter
of a reduced block, and the stream check samples coordinates of a full
default hands stream through the classification loss.
"""

import zlib

import numpy as np

from . import tensor as T
from .blocks import MultiScaleTemporalConv, SpatialAttentionGraphConv, SpatioTemporalBlock
from .modalities import ModalitySelection, assemble
from .model import ModelConfig, StreamConfig, build_model
from .skeleton import build_adjacency
from .tensor import Tensor, grad_check, tsum

__all__ = ["OP_CHECKS", "MODULE_CHECKS", "check_op", "check_module", "run_suite"]

_F64 = np.float64


def _rng(tag, seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [zlib.crc32(tag.encode()), seed])))


def _t(rng, *shape, scale=1.0, away_from=None, margin=0.02):
    data = rng.standard_normal(shape) * scale
    if away_from is not None:
        close = np.abs(data - away_from) < margin
        data = np.where(close, data + np.sign(data - away_from + 1e-12) * 2 * margin, data)
    return Tensor(data.astype(_F64), requires_grad=True)


def _proj(rng, out):
    r = Tensor(rng.standard_normal(out.shape).astype(_F64))
    return tsum(T.mul(out, r))


# ---------------------------------------------------------------------------
# single ops


def _check_matmul(seed, tol):
    rng = _rng("matmul", seed)
    m, k, n = rng.integers(1, 5, 3)
    a, b = _t(rng, 2, m, k), _t(rng, 2, k, n)
    return grad_check(lambda: _proj(_rng("matmul-p", seed), T.matmul(a, b)),
                      [a, b], tol=tol, name=f"matmul[{seed}]")


def _check_conv2d(seed, tol):
    rng = _rng("conv", seed)
    kt = int(rng.integers(1, 4))
    dil = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    t_in = int(rng.integers(dil * (kt - 1) + 1, 8))
    x = _t(rng, 2, 3, t_in, 4)
    w = _t(rng, 2, 3, kt, 1, scale=0.5)
    pad = dil * (kt - 1) // 2
    return grad_check(
        lambda: _proj(_rng("conv-p", seed),
                      T.conv2d(x, w, stride_t=stride, dilation_t=dil, pad_t=pad)),
        [x, w], tol=tol, name=f"conv2d[{seed}]")


def _check_pointwise(seed, tol):
    rng = _rng("pw", seed)
    x, w = _t(rng, 2, 5, 3, 4), _t(rng, 6, 5, scale=0.5)
    return grad_check(lambda: _proj(_rng("pw-p", seed), T.pointwise_conv(x, w)),
                      [x, w], tol=tol, name=f"pointwise_conv[{seed}]")


def _check_temporal_pool(seed, tol):
    rng = _rng("tp", seed)
    x = _t(rng, 2, 3, 5, 4)
    return grad_check(lambda: _proj(_rng("tp-p", seed), T.temporal_pool(x)),
                      [x], tol=tol, name=f"temporal_pool[{seed}]")


def _check_gap(seed, tol):
    rng = _rng("gap", seed)
    x = _t(rng, 2, 3, 5, 4)
    return grad_check(lambda: _proj(_rng("gap-p", seed), T.global_avg_pool(x)),
                      [x], tol=tol, name=f"global_avg_pool[{seed}]")


def _check_relu(seed, tol):
    rng = _rng("relu", seed)
    x = _t(rng, 3, 4, away_from=0.0)
    return grad_check(lambda: _proj(_rng("relu-p", seed), T.relu(x)),
                      [x], tol=tol, name=f"relu[{seed}]")


def _check_tanh(seed, tol):
    rng = _rng("tanh", seed)
    x = _t(rng, 3, 4)
    return grad_check(lambda: _proj(_rng("tanh-p", seed), T.tanh(x)),
                      [x], tol=tol, name=f"tanh[{seed}]")


def _check_softmax(seed, tol):
    rng = _rng("sm", seed)
    x = _t(rng, 3, 5)
    return grad_check(lambda: _proj(_rng("sm-p", seed), T.softmax(x)),
                      [x], tol=tol, name=f"softmax[{seed}]")


def _check_max_pool(seed, tol):
    rng = _rng("mp", seed)
    x = _t(rng, 2, 3, 6, 2)
    stride = int(rng.integers(1, 3))
    return grad_check(lambda: _proj(_rng("mp-p", seed), T.max_pool_t(x, 3, stride, 1)),
                      [x], tol=tol, name=f"max_pool_t[{seed}]")


def _check_batch_norm(seed, tol):
    rng = _rng("bn", seed)
    x = _t(rng, 3, 4, 5, 2)
    gamma = _t(rng, 4, scale=0.5)
    beta = _t(rng, 4, scale=0.5)
    training = seed % 2 == 0
    rm = rng.standard_normal(4) * 0.3
    rv = 1.0 + 0.5 * rng.random(4)

    def f():
        return _proj(_rng("bn-p", seed),
                     T.batch_norm_2d(x, gamma, beta, rm.copy(), rv.copy(), training))

    mode = "train" if training else "eval"
    return grad_check(f, [x, gamma, beta], tol=tol, name=f"batch_norm_2d/{mode}[{seed}]")


def _check_cross_entropy(seed, tol):
    rng = _rng("ce", seed)
    logits = _t(rng, 4, 6)
    labels = rng.integers(0, 6, 4)
    return grad_check(lambda: T.cross_entropy(logits, labels),
                      [logits], tol=tol, name=f"cross_entropy[{seed}]")


def _check_assemble(seed, tol):
    rng = _rng("mmdg", seed)
    x = _t(rng, 3, 5, 4, 1)
    parent = np.array([0, 0, 1, 2])
    return grad_check(
        lambda: _proj(_rng("mmdg-p", seed), assemble(x, parent, ModalitySelection())),
        [x], tol=tol, name=f"mmdg_assemble[{seed}]")


OP_CHECKS = {
    "matmul": _check_matmul,
    "conv2d": _check_conv2d,
    "pointwise_conv": _check_pointwise,
    "temporal_pool": _check_temporal_pool,
    "global_avg_pool": _check_gap,
    "relu": _check_relu,
    "tanh": _check_tanh,
    "softmax": _check_softmax,
    "max_pool_t": _check_max_pool,
    "batch_norm_2d": _check_batch_norm,
    "cross_entropy": _check_cross_entropy,
    "mmdg_assemble": _check_assemble,
}


def check_op(name, seed, tol=1e-4):
    return OP_CHECKS[name](seed, tol)


# ---------------------------------------------------------------------------
# blocks and streams


def _chain_adjacency(n):
    parent = np.arange(n)
    parent[1:] = np.arange(n - 1)
    return build_adjacency(parent)


def _module_inputs(module, rng, shape):
    x = _t(rng, *shape)
    params = [p for _, p in module.named_parameters()]
    for p in params:
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    return x, params


def _check_samg(seed, tol):
    rng = _rng("samg", seed)
    adj = _chain_adjacency(5)
    mod = SpatialAttentionGraphConv(6, 8, adj, rng, dtype=_F64)
    x, params = _module_inputs(mod, rng, (2, 6, 4, 5))
    return grad_check(lambda: _proj(_rng("samg-p", seed), mod(x)),
                      [x] + params, tol=tol, name=f"samg[{seed}]")


def _check_trm(seed, tol):
    rng = _rng("trm", seed)
    mod = MultiScaleTemporalConv(8, 1 + seed % 2, rng, dtype=_F64)
    mod.train()
    x, params = _module_inputs(mod, rng, (2, 8, 6, 3))
    return grad_check(lambda: _proj(_rng("trm-p", seed), mod(x)),
                      [x] + params, tol=tol, name=f"trm[{seed}]")


def _check_strb(seed, tol):
    rng = _rng("strb", seed)
    adj = _chain_adjacency(4)
    mod = SpatioTemporalBlock(6, 8, 1 + seed % 2, adj, rng, dtype=_F64)
    mod.train()
    x, params = _module_inputs(mod, rng, (2, 6, 6, 4))
    return grad_check(lambda: _proj(_rng("strb-p", seed), mod(x)),
                      [x] + params, tol=tol, name=f"strb[{seed}]")


def _check_stream(seed, tol):
    """Full default hands stream through the loss, sampled coordinates."""
    rng = _rng("stream", seed)
    cfg = ModelConfig(topology="ntu25", num_classes=4, window=8,
                      streams=[StreamConfig(part="hands", num_classes=4)],
                      fusion_weights=[1.0], seed=seed)
    model = build_model(cfg, dtype=_F64)
    net = model.streams["hands"]
    net.train()
    x = _t(rng, 1, 12, 8, 13, scale=0.5)
    labels = rng.integers(0, 4, 1)
    params = [p for _, p in net.named_parameters()]
    for p in params:
        p.data = p.data + 0.02 * rng.standard_normal(p.data.shape)
    return grad_check(lambda: T.cross_entropy(net(x), labels),
                      [x] + params, tol=tol, name=f"hands_stream[{seed}]",
                      rng=rng, max_coords=2)


MODULE_CHECKS = {
    "samg": _check_samg,
    "trm": _check_trm,
    "strb": _check_strb,
    "stream": _check_stream,
}


def check_module(name, seed, tol=1e-4):
    return MODULE_CHECKS[name](seed, tol)


def run_suite(modules=("ops", "mmdg", "samg", "trm", "strb", "stream"),
              seeds=20, tol=1e-4, base_seed=0):
    """Run the requested check groups; returns all GradCheckReports."""
    reports = []
    for group in modules:
        if group == "ops":
            for name in OP_CHECKS:
                if name == "mmdg_assemble":
                    continue
                for seed in range(base_seed, base_seed + seeds):
                    reports.append(check_op(name, seed, tol))
        elif group == "mmdg":
            for seed in range(base_seed, base_seed + seeds):
                reports.append(check_op("mmdg_assemble", seed, tol))
        elif group in ("samg", "trm", "strb"):
            for seed in range(base_seed, base_seed + min(seeds, 4)):
                reports.append(check_module(group, seed, tol))
        elif group == "stream":
            for seed in range(base_seed, base_seed + min(seeds, 2)):
                reports.append(check_module("stream", seed, tol))
        else:
            raise KeyError(f"unknown gradcheck group {group!r}")
    return reports

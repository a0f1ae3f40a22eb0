"""Spatio-temporal relational blocks: dynamic-adjacency graph convolution
followed by multi-branch dilated temporal convolution, with residual wiring.
"""

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Module, ModuleList, PointwiseConv, TemporalConv
from .tensor import ConfigError, Parameter, Tensor

__all__ = [
    "SpatialAttentionGraphConv", "MultiScaleTemporalConv", "SpatioTemporalBlock",
    "DEFAULT_BRANCHES",
]

DEFAULT_BRANCHES = (("conv", 5, 1), ("conv", 5, 2), ("pool", 3), ("point",))


class SpatialAttentionGraphConv(Module):
    """Graph convolution over a data-dependent hybrid adjacency.

    Two pointwise embeddings are temporally pooled and pair-wise subtracted
    across joints to form an attention map M; the block aggregates features
    with alpha*M + A, where A is the fixed normalized skeleton adjacency and
    alpha starts at zero (pure fixed-graph behavior early in training).

    channelwise=True expands M to one NxN map per output channel; False keeps
    a single shared map. squash="tanh" applies tanh to the pairwise
    difference before expansion; "conv" leaves the expansion conv to play the
    role of the nonlinearity on its own (the literal 1x1-conv reading).
    """

    def __init__(self, cin, cout, adjacency, rng, reduction=8,
                 channelwise=True, squash="tanh", dtype=np.float32):
        super().__init__()
        if squash not in ("tanh", "conv"):
            raise ConfigError(f"unknown squash mode {squash!r}")
        self.cin, self.cout = cin, cout
        self.squash = squash
        self.cr = max(cin // reduction, 8)
        cmap = cout if channelwise else 1
        self.embed_src = PointwiseConv(cin, self.cr, rng, dtype=dtype)
        self.embed_dst = PointwiseConv(cin, self.cr, rng, dtype=dtype)
        self.expand = PointwiseConv(self.cr, cmap, rng, bias=False, dtype=dtype)
        self.proj = PointwiseConv(cin, cout, rng, dtype=dtype)
        self.alpha = Parameter(np.zeros(1, dtype=dtype))
        adj = np.asarray(adjacency, dtype=dtype)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConfigError(f"adjacency must be square, got {adj.shape}")
        self.register_buffer("adjacency", adj)

    def attention(self, x):
        """Data-dependent map: [B,Cin,T,N] -> [B,cmap,N,N]."""
        b = x.shape[0]
        n = x.shape[3]
        src = T.temporal_pool(self.embed_src(x))             # [B,Cr,N]
        dst = T.temporal_pool(self.embed_dst(x))
        diff = T.sub(T.reshape(src, (b, self.cr, n, 1)),
                     T.reshape(dst, (b, self.cr, 1, n)))
        if self.squash == "tanh":
            diff = T.tanh(diff)
        return self.expand(diff)

    def forward(self, x):
        n = x.shape[3]
        if n != self.adjacency.shape[0]:
            raise ConfigError(f"input has {n} joints, adjacency expects "
                              f"{self.adjacency.shape[0]}")
        hybrid = self.alpha * self.attention(x) + Tensor(self.adjacency)
        feats = self.proj(x)                                 # [B,Cout,T,N]
        # out[..., t, i] = sum_j hybrid[..., i, j] * feats[..., t, j]
        return T.matmul(feats, T.transpose(hybrid, (0, 1, 3, 2)))

    def flops(self, t, n):
        macs = 2 * self.cin * self.cr * t * n                # embeddings
        macs += self.cr * self.expand.cout * n * n           # map expansion
        macs += self.cin * self.cout * t * n                 # feature projection
        macs += self.cout * n * n * t                        # graph aggregation
        return macs


class _ConvBranch(Module):
    def __init__(self, cin, width, kt, dilation, stride, rng, dtype):
        super().__init__()
        self.reduce = PointwiseConv(cin, width, rng, dtype=dtype)
        self.bn_in = BatchNorm2d(width, dtype=dtype)
        self.conv = TemporalConv(width, width, kt, rng, stride=stride,
                                 dilation=dilation, dtype=dtype)
        self.bn_out = BatchNorm2d(width, dtype=dtype)

    def forward(self, x):
        h = T.relu(self.bn_in(self.reduce(x)))
        return self.bn_out(self.conv(h))

    def flops(self, t, n):
        return self.reduce.flops(t * n) + self.conv.flops(t, n)


class _PoolBranch(Module):
    def __init__(self, cin, width, kernel, stride, rng, dtype):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.reduce = PointwiseConv(cin, width, rng, dtype=dtype)
        self.bn_in = BatchNorm2d(width, dtype=dtype)
        self.bn_out = BatchNorm2d(width, dtype=dtype)

    def forward(self, x):
        h = T.relu(self.bn_in(self.reduce(x)))
        return self.bn_out(T.max_pool_t(h, self.kernel, self.stride, pad=1))

    def flops(self, t, n):
        return self.reduce.flops(t * n)


class _PointBranch(Module):
    def __init__(self, cin, width, stride, rng, dtype):
        super().__init__()
        self.conv = TemporalConv(cin, width, 1, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(width, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x))

    def flops(self, t, n):
        return self.conv.flops(t, n)


class MultiScaleTemporalConv(Module):
    """Parallel temporal branches over reduced channel slices, concatenated.

    Every branch narrows to channels/len(branches) and applies its own
    temporal operator (dilated conv, max pool, or pointwise); all branches
    share the stride so the concatenation lines back up to `channels`.
    """

    def __init__(self, channels, stride, rng, branches=DEFAULT_BRANCHES,
                 dtype=np.float32):
        super().__init__()
        self.channels, self.stride = channels, stride
        if channels % len(branches) != 0:
            raise ConfigError(f"{channels} channels not divisible by "
                              f"{len(branches)} branches")
        width = channels // len(branches)
        self.width = width
        mods = []
        for spec in branches:
            kind = spec[0]
            if kind == "conv":
                _, kt, dil = spec
                mods.append(_ConvBranch(channels, width, kt, dil, stride, rng, dtype))
            elif kind == "pool":
                mods.append(_PoolBranch(channels, width, spec[1], stride, rng, dtype))
            elif kind == "point":
                mods.append(_PointBranch(channels, width, stride, rng, dtype))
            else:
                raise ConfigError(f"unknown branch kind {kind!r}")
        self.branches = ModuleList(mods)

    def forward(self, x):
        t = x.shape[2]
        if t < self.stride:
            raise ConfigError(f"input too short for stride: T={t}")
        outs = [b(x) for b in self.branches]
        t_out = outs[0].shape[2]
        for o in outs[1:]:
            if o.shape[2] != t_out:
                raise ConfigError("branch output lengths disagree; "
                                  "check kernel/dilation vs input length")
        return T.concat(outs, axis=1)

    def flops(self, t, n):
        return sum(b.flops(t, n) for b in self.branches)


class SpatioTemporalBlock(Module):
    """One trunk block: graph conv, temporal module, residual, ReLU."""

    def __init__(self, cin, cout, stride, adjacency, rng,
                 branches=DEFAULT_BRANCHES, channelwise=True, squash="tanh",
                 dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.stride = cin, cout, stride
        self.samg = SpatialAttentionGraphConv(
            cin, cout, adjacency, rng, channelwise=channelwise, squash=squash,
            dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.trm = MultiScaleTemporalConv(cout, stride, rng, branches=branches,
                                          dtype=dtype)
        if cin != cout or stride != 1:
            self.res_conv = TemporalConv(cin, cout, 1, rng, stride=stride, dtype=dtype)
            self.res_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.res_conv = None

    def forward(self, x):
        h = T.relu(self.bn(self.samg(x)))
        y = self.trm(h)
        if self.res_conv is None:
            r = x
        else:
            r = self.res_bn(self.res_conv(x))
        return T.relu(y + r)

    def out_frames(self, t):
        return (t - 1) // self.stride + 1

    def flops(self, t, n):
        macs = self.samg.flops(t, n) + self.trm.flops(t, n)
        if self.res_conv is not None:
            macs += self.res_conv.flops(t, n)
        return macs, self.out_frames(t)

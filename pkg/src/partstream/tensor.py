"""Dense tensors with reverse-mode autodiff on a numpy backend.

Two working precisions: float32 for training, float64 for finite-difference
gradient checks (float32 is too noisy for central differences).
"""

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ShapeError", "ConfigError", "no_grad",
    "add", "sub", "mul", "neg", "matmul", "reshape", "transpose", "concat",
    "narrow", "take", "subsample", "tsum", "mean_over",
    "relu", "tanh", "softmax", "conv2d", "pointwise_conv", "max_pool_t",
    "temporal_pool", "global_avg_pool", "batch_norm_2d", "cross_entropy",
    "grad_check", "GradCheckReport",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(ValueError):
    """A structurally valid input that produces an impossible configuration."""


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def backward(self, grad=None):
        """Reverse-mode pass seeding this tensor's gradient (ones for a scalar)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        _accum(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


class Parameter(Tensor):
    """A trainable tensor; owns a dotted name once registered in a module tree."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = ""


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t, g):
    # grad buffers are never mutated in place, so holding a view is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _from_op(data, parents, backward_fn):
    out = Tensor(data)
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(out, (a, b), back)


def sub(a, b):
    out = a.data - b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(out, (a, b), back)


def mul(a, b):
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out, (a, b), back)


def neg(a):
    def back(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), back)


def matmul(a, b):
    """Batched matrix product over the trailing two axes (numpy broadcasting)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast_mat(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast_mat(gb, b.data.shape))

    return _from_op(out, (a, b), back)


def _unbroadcast_mat(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    old = a.data.shape

    def back(g):
        _accum(a, g.reshape(old))

    return _from_op(a.data.reshape(shape), (a,), back)


def transpose(a, axes):
    inv = np.argsort(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _from_op(a.data.transpose(axes), (a,), back)


def concat(tensors, axis):
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return _from_op(out, tuple(tensors), back)


def narrow(a, axis, start, length):
    """Contiguous slice of `length` entries along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _from_op(a.data[idx], (a,), back)


def subsample(a, step, axis):
    """Every `step`-th entry along `axis` (strided temporal downsampling)."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(None, None, step)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _from_op(a.data[idx], (a,), back)


def take(a, indices, axis):
    """Gather along `axis`; backward scatter-adds into the source."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accum(a, full)

    return _from_op(out, (a,), back)


def tsum(a):
    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _from_op(a.data.sum(), (a,), back)


def mean_over(a, axes):
    axes = tuple(axes)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def back(g):
        ge = np.expand_dims(g, axes) / count
        _accum(a, np.broadcast_to(ge, a.data.shape).astype(a.data.dtype))

    return _from_op(a.data.mean(axis=axes), (a,), back)


def temporal_pool(x):
    """Mean over the frame axis: [B,C,T,N] -> [B,C,N]."""
    return mean_over(x, (2,))


def global_avg_pool(x):
    """Mean over frames and joints: [B,C,T,N] -> [B,C]."""
    return mean_over(x, (2, 3))


# ---------------------------------------------------------------------------
# activations


def relu(a):
    out = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (out > 0))

    return _from_op(out, (a,), back)


def tanh(a):
    out = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1 - out * out))

    return _from_op(out, (a,), back)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out)

    return _from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# convolutions and pooling


def conv2d(x, w, stride_t=1, dilation_t=1, pad_t=0, bias=None):
    """Cross-correlation of [B,Cin,T,N] with [Cout,Cin,kt,kn].

    Stride, dilation and zero padding apply to the temporal axis only; the
    joint axis is convolved 'valid' (N' = N - kn + 1). Implemented as im2col
    plus one GEMM; backward scatters through the same window geometry. An
    optional bias [Cout] is fused into the output.
    """
    B, cin, T, N = x.data.shape
    cout, cw, kt, kn = w.data.shape
    if cin != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    if stride_t < 1 or dilation_t < 1 or pad_t < 0:
        raise ConfigError(f"bad conv geometry: stride={stride_t} dilation={dilation_t} pad={pad_t}")
    span = dilation_t * (kt - 1) + 1
    t_out = (T + 2 * pad_t - span) // stride_t + 1
    n_out = N - kn + 1
    if t_out < 1 or n_out < 1:
        raise ConfigError(
            f"conv2d output would be empty: input {x.data.shape}, kernel {w.data.shape}, "
            f"stride={stride_t} dilation={dilation_t} pad={pad_t}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_t, pad_t), (0, 0))) if pad_t else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (span, kn), axis=(2, 3))
    win = win[:, :, ::stride_t, :, ::dilation_t, :]          # [B,C,T',N',kt,kn]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * t_out * n_out, cin * kt * kn)
    wmat = w.data.reshape(cout, cin * kt * kn)
    out = cols @ wmat.T                                      # [B*T'*N', Cout]
    if bias is not None:
        out += bias.data
    out = out.reshape(B, t_out, n_out, cout).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * t_out * n_out, cout)
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=0))
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, t_out, n_out, cin, kt, kn)
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)        # [B,C,T',N',kt,kn]
            gxp = np.zeros((B, cin, T + 2 * pad_t, N), dtype=x.data.dtype)
            t_hi = (t_out - 1) * stride_t + 1
            for u in range(kt):
                t0 = u * dilation_t
                for v in range(kn):
                    gxp[:, :, t0:t0 + t_hi:stride_t, v:v + n_out] += gcols[:, :, :, :, u, v]
            _accum(x, gxp[:, :, pad_t:pad_t + T, :] if pad_t else gxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _from_op(out, parents, back)


def pointwise_conv(x, w, bias=None):
    """1x1 convolution: per-position channel map of [B,Cin,*spatial] by [Cout,Cin].

    The optional bias [Cout] is fused into the output.
    """
    if w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"pointwise channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    shape = x.data.shape
    b, cin = shape[0], shape[1]
    cout = w.data.shape[0]
    xf = np.ascontiguousarray(x.data).reshape(b, cin, -1)    # [B,Cin,S]
    out = np.matmul(w.data, xf)                              # [B,Cout,S]
    if bias is not None:
        out += bias.data[None, :, None]

    def back(g):
        gf = np.ascontiguousarray(g).reshape(b, cout, -1)
        if bias is not None and bias.requires_grad:
            _accum(bias, gf.sum(axis=(0, 2)))
        if w.requires_grad:
            _accum(w, np.tensordot(gf, xf, axes=([0, 2], [0, 2])))
        if x.requires_grad:
            _accum(x, np.matmul(w.data.T, gf).reshape(shape))

    parents = (x, w) if bias is None else (x, w, bias)
    return _from_op(out.reshape((b, cout) + shape[2:]), parents, back)


def max_pool_t(x, kernel=3, stride=1, pad=1):
    """Temporal max pooling of [B,C,T,N]; padding uses -inf sentinels."""
    B, C, T, N = x.data.shape
    t_out = (T + 2 * pad - kernel) // stride + 1
    if t_out < 1:
        raise ConfigError(f"max_pool_t output would be empty: T={T} kernel={kernel} pad={pad}")
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, ::stride]
    win = np.moveaxis(win, -1, 3)                            # [B,C,T',k,N]
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def back(g):
        gx = np.zeros_like(x.data)
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        ni = np.arange(N)[None, None, None, :]
        tsrc = np.arange(t_out)[None, None, :, None] * stride + arg - pad
        np.add.at(gx, (bi, ci, tsrc, ni), g)
        _accum(x, gx)

    return _from_op(out, (x,), back)


def batch_norm_2d(x, gamma, beta, running_mean, running_var, training,
                  momentum=0.1, eps=1e-5):
    """Per-channel normalization of [B,C,T,N].

    Training mode normalizes with batch statistics over (B,T,N) and updates
    the running buffers in place; eval mode normalizes with the buffers.
    """
    B, C, T, N = x.data.shape
    if training:
        m = B * T * N
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    ivar = 1.0 / np.sqrt(var + eps)
    scale = (gamma.data * ivar)[None, :, None, None]
    shift = (beta.data - gamma.data * ivar * mean)[None, :, None, None]
    out = x.data * scale
    out += shift

    def back(g):
        # per-channel reductions give dgamma/dbeta without materializing xhat:
        # sum(g*xhat) = ivar * (sum(g*x) - mean*sum(g))
        sg = g.sum(axis=(0, 2, 3))
        sgx = np.einsum("bctn,bctn->c", g, x.data)
        dgamma = ivar * (sgx - mean * sg)
        if gamma.requires_grad:
            _accum(gamma, dgamma)
        if beta.requires_grad:
            _accum(beta, sg)
        if x.requires_grad:
            if training:
                # gx = scale*g + Bc*x + Cc with per-channel Bc, Cc folding the
                # batch-statistic terms of the BN backward
                m = B * T * N
                bc = -(ivar * ivar) * gamma.data * dgamma / m
                cc = -ivar * gamma.data * sg / m - bc * mean
                gx = g * scale
                gx += x.data * bc[None, :, None, None]
                gx += cc[None, :, None, None]
            else:
                gx = g * scale
            _accum(x, gx)

    return _from_op(out, (x, gamma, beta), back)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    B, K = logits.data.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"label out of range for {K} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    nll = logz - logits.data[np.arange(B), labels]
    out = nll.mean()

    def back(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(B), labels] -= 1.0
        _accum(logits, (g / B) * p)

    return _from_op(out, (logits,), back)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    def __init__(self, name, max_rel_err, tol, worst=None, checked=0, skipped=0):
        self.name = name
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.worst = worst
        self.checked = checked
        self.skipped = skipped

    @property
    def passed(self):
        return self.max_rel_err < self.tol and self.checked > 0

    def __repr__(self):
        status = "ok" if self.passed else "FAIL"
        extra = f", {self.skipped} non-smooth skipped" if self.skipped else ""
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:g}, {self.checked} coords{extra})")


def grad_check(f, inputs, eps=1e-5, tol=1e-4, name="grad_check", rng=None,
               max_coords=None):
    """Compare analytic gradients of scalar-valued f against central differences.

    Inputs must be float64 tensors with requires_grad set. Relative error is
    |a - n| / max(1, |a|, |n|); when max_coords is given, only a random
    subsample of coordinates per input is probed (rng required).

    Central differences are meaningless across kinks (relu at zero, max-pool
    ties), so each coordinate carries a curvature probe |f+ + f- - 2 f0|; a
    coordinate whose probe exceeds what smooth curvature could produce sits
    on a kink and is skipped. The kink-induced error of any kept coordinate
    is below tol/2 by the same bound.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ConfigError("grad_check requires float64 inputs")
        t.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ConfigError("grad_check target must be scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = (0.0, None)
    checked = skipped = 0
    with no_grad():
        f0 = float(f().data)
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + eps
                fp = float(f().data)
                flat[idx] = orig - eps
                fm = float(f().data)
                flat[idx] = orig
                num = (fp - fm) / (2 * eps)
                a = ana.reshape(-1)[idx]
                denom = max(1.0, abs(a), abs(num))
                slope_jump = abs(fp + fm - 2 * f0) / (2 * eps)
                if slope_jump > 0.25 * tol * denom:
                    skipped += 1
                    continue
                checked += 1
                rel = abs(a - num) / denom
                if rel > worst[0]:
                    worst = (rel, (idx, a, num))
    return GradCheckReport(name, worst[0], tol, worst[1], checked, skipped)

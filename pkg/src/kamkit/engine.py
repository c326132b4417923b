"""Dense-tensor ops with analytic gradients, a replay tape, SGD, and a gradient checker.

Feature maps are ordered [batch, channels, height, width]; fully connected
activations are [batch, features]. Every op is a pure function of numpy
arrays. Passing a `Tape` records the forward sequence so `Tape.backprop`
can accumulate gradients into watched `Param`s (and watched input arrays)
by replaying the recorded ops in reverse.

Arrays are float32 in production; the ops are dtype-generic so oracle
comparisons (finite differences) can run the identical code path in
float64.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


class ShapeMismatch(ValueError):
    """Operand shapes are inconsistent with the op's contract."""


class NumericError(ValueError):
    """Non-finite values or a numerically invalid request."""


class Param:
    """Learnable tensor with gradient and momentum buffers of identical shape."""

    __slots__ = ("name", "value", "grad", "velocity")

    def __init__(self, value, name: str = "param"):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float32)
        value = np.ascontiguousarray(value)
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def numel(self) -> int:
        return int(self.value.size)

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class Tape:
    """Recorded forward sequence; replayed in reverse by `backprop`.

    A tape is single-use: record one forward pass, call `backprop` once.
    Gradients accumulate (+=) into `Param.grad` for watched params; watched
    plain arrays get their gradient via `grad_wrt`.
    """

    def __init__(self):
        self._records = []   # (output object, input arrays, backward fn)
        self._params = {}    # id(value array) -> Param
        self._wanted = {}    # id(array) -> array  (watched non-param inputs)
        self._grads = {}     # id(array) -> accumulated gradient
        self._done = False

    def watch(self, *params: Param):
        for p in params:
            self._params[id(p.value)] = p

    def watch_input(self, *arrays: np.ndarray):
        for a in arrays:
            self._wanted[id(a)] = a

    def record(self, out, inputs, backward):
        """Append one op: `backward(d_out)` returns grads aligned with `inputs`."""
        self._records.append((out, tuple(inputs), backward))

    def backprop(self, seed: float = 1.0):
        """Seed the last recorded output with `seed` and accumulate gradients."""
        if self._done:
            raise NumericError("tape already backpropagated; record a new forward pass")
        if not self._records:
            raise NumericError("backprop without a recorded forward pass")
        self._done = True
        table = {id(self._records[-1][0]): seed}
        for out, inputs, backward in reversed(self._records):
            d_out = table.pop(id(out), None)
            if d_out is None:
                continue
            for arr, g in zip(inputs, backward(d_out)):
                if g is None:
                    continue
                key = id(arr)
                if key in table:
                    table[key] = table[key] + g
                else:
                    table[key] = g
        for key, g in table.items():
            if key in self._params:
                self._params[key].grad += g
            elif key in self._wanted:
                self._grads[key] = g

    def grad_wrt(self, array: np.ndarray):
        """Gradient of the seeded loss w.r.t. a watched input array."""
        return self._grads.get(id(array))


# ---------------------------------------------------------------------------
# ops


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _window_view(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Read-only sliding windows of shape (B, Ho, Wo, C, k, k)."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, c, k, k),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def conv2d(x, w, b, stride: int = 1, pad: int = 0, tape: Tape | None = None):
    """2-D convolution: y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] x[n,c,i*s+u-p,j*s+v-p].

    x: [B, Cin, H, W]; w: [Cout, Cin, k, k]; b: [Cout]. Zero padding.
    """
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got x {x.shape}, w {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d kernel must be square, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, kernel expects "
            f"{w.shape[1]} (x {x.shape}, w {w.shape})"
        )
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d bias shape {b.shape} != ({w.shape[0]},)")
    k = w.shape[2]
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeMismatch(f"conv2d needs k>=1, stride>=1, pad>=0; got k={k}, stride={stride}, pad={pad}")
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = _out_extent(h, k, stride, pad), _out_extent(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(
            f"conv2d output extent ({ho}x{wo}) not positive for input {h}x{wd}, "
            f"k={k}, stride={stride}, pad={pad}"
        )

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _window_view(xp, k, stride, ho, wo).reshape(bsz * ho * wo, cin * k * k)
    wm = w.reshape(cout, -1)
    y = cols @ wm.T + b
    y = np.ascontiguousarray(y.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    if tape is not None:
        def backward(dy):
            dyt = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, cout)
            dw = (dyt.T @ cols).reshape(w.shape)
            db = dyt.sum(axis=0)
            dcols = dyt @ wm
            dwin = dcols.reshape(bsz, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u:u + (ho - 1) * stride + 1:stride,
                        v:v + (wo - 1) * stride + 1:stride] += dwin[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
            return dx, dw, db

        tape.record(y, (x, w, b), backward)
    return y


def conv1x1(x, w, tape: Tape | None = None):
    """Per-position channel mixing: y[n,c,...] = sum_{c'} w[c,c'] x[n,c',...].

    x: [B, Cin, H, W] or [B, Cin]; w: [Cout, Cin]. No bias; spatial extents
    are preserved.
    """
    x, w = np.asarray(x), np.asarray(w)
    if w.ndim != 2:
        raise ShapeMismatch(f"conv1x1 weight must be 2-d [Cout, Cin], got {w.shape}")
    if x.ndim not in (2, 4):
        raise ShapeMismatch(f"conv1x1 expects 2-d or 4-d input, got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(
            f"conv1x1 channel mismatch: input has {x.shape[1]} channels, weight expects "
            f"{w.shape[1]} (x {x.shape}, w {w.shape})"
        )
    if x.ndim == 2:
        y = x @ w.T
        if tape is not None:
            def backward(dy):
                return dy @ w, dy.T @ x
            tape.record(y, (x, w), backward)
        return y

    bsz, cin, h, wd = x.shape
    xm = x.reshape(bsz, cin, h * wd)
    y = np.matmul(w, xm).reshape(bsz, w.shape[0], h, wd)
    if tape is not None:
        def backward(dy):
            dym = dy.reshape(bsz, w.shape[0], h * wd)
            dx = np.matmul(w.T, dym).reshape(x.shape)
            dw = np.tensordot(dym, xm, axes=([0, 2], [0, 2]))
            return dx, dw
        tape.record(y, (x, w), backward)
    return y


def nonparam(x, activation: str = "none", pool=None, tape: Tape | None = None):
    """Parameter-free stage: activation first, then max pooling.

    activation: "none" | "relu". pool: None or (k, s) applied per channel
    with no padding. Max pooling routes gradient to the first (row-major)
    maximal element of each window.
    """
    x = np.asarray(x)
    if activation not in ("none", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    if pool is not None and x.ndim != 4:
        raise ShapeMismatch(f"pooling needs a 4-d feature map, got {x.shape}")

    a = np.maximum(x, 0) if activation == "relu" else x

    if pool is None:
        y = a
        pool_cache = None
    else:
        k, s = int(pool[0]), int(pool[1])
        if k < 1 or s < 1:
            raise ShapeMismatch(f"pool window/stride must be >=1, got {pool}")
        bsz, c, h, wd = a.shape
        if k > h or k > wd:
            raise ShapeMismatch(f"pool window {k} larger than input {h}x{wd}")
        ho, wo = _out_extent(h, k, s, 0), _out_extent(wd, k, s, 0)
        if s == k and h % k == 0 and wd % k == 0:
            # non-overlapping tiling: pure reshapes plus two-stage max whose
            # combined argmax keeps the row-major first-occurrence tie-break
            win = np.ascontiguousarray(a).reshape(bsz, c, ho, k, wo, k)
            v_idx = win.argmax(axis=5)                               # (B,C,Ho,k,Wo)
            row_max = np.take_along_axis(win, v_idx[..., None], axis=5)[..., 0]
            u_idx = row_max.argmax(axis=3)                           # (B,C,Ho,Wo)
            y = np.take_along_axis(row_max, u_idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            v_sel = np.take_along_axis(v_idx, u_idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            pool_cache = ("tiled", u_idx, v_sel, (bsz, c, ho, wo, k))
        else:
            win = _window_view(a, k, s, ho, wo)                      # (B,Ho,Wo,C,k,k)
            flat = win.reshape(bsz, ho, wo, c, k * k)
            argmax = flat.argmax(axis=-1)                            # first occurrence
            y = np.ascontiguousarray(
                np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
                .transpose(0, 3, 1, 2))
            pool_cache = ("strided", argmax, (bsz, c, ho, wo, k, s))

    if tape is not None:
        def backward(dy):
            if pool_cache is None:
                d_in = dy
            elif pool_cache[0] == "tiled":
                _, u_idx, v_sel, (bsz, c, ho, wo, k) = pool_cache
                da = np.zeros((bsz, c, ho, k, wo, k), dtype=dy.dtype)
                bb = np.arange(bsz)[:, None, None, None]
                cc = np.arange(c)[None, :, None, None]
                ii = np.arange(ho)[None, None, :, None]
                jj = np.arange(wo)[None, None, None, :]
                da[bb, cc, ii, u_idx, jj, v_sel] = dy
                d_in = da.reshape(a.shape)
            else:
                _, argmax, (bsz, c, ho, wo, k, s) = pool_cache
                u, v = np.divmod(argmax, k)                          # (B,Ho,Wo,C)
                bb = np.arange(bsz)[:, None, None, None]
                cc = np.arange(c)[None, None, None, :]
                rows = np.arange(ho)[None, :, None, None] * s + u
                cols = np.arange(wo)[None, None, :, None] * s + v
                da = np.zeros_like(a)
                np.add.at(da, (bb, cc, rows, cols), dy.transpose(0, 2, 3, 1))
                d_in = da
            if activation == "relu":
                d_in = d_in * (x > 0)
            return (d_in,)

        tape.record(y, (x,), backward)
    return y


def linear(x, w, b, tape: Tape | None = None):
    """Affine map y = x w^T + b with x: [B, D], w: [M, D], b: [M]."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeMismatch(f"linear expects 2-d operands, got x {x.shape}, w {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(
            f"linear feature mismatch: input has {x.shape[1]} features, weight expects "
            f"{w.shape[1]} (x {x.shape}, w {w.shape})"
        )
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"linear bias shape {b.shape} != ({w.shape[0]},)")
    y = x @ w.T + b
    if tape is not None:
        def backward(dy):
            return dy @ w, dy.T @ x, dy.sum(axis=0)
        tape.record(y, (x, w, b), backward)
    return y


def flatten2d(x, tape: Tape | None = None):
    """Collapse all non-batch axes: [B, ...] -> [B, prod(...)]."""
    x = np.asarray(x)
    y = x.reshape(x.shape[0], -1)
    if tape is not None:
        def backward(dy):
            return (dy.reshape(x.shape),)
        tape.record(y, (x,), backward)
    return y


def softmax(x, temperature: float = 1.0, tape: Tape | None = None):
    """Row-wise softened softmax of logits x: [B, M]; rows sum to 1."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax expects [B, M] logits, got {x.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    z = x / x.dtype.type(temperature)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    if tape is not None:
        def backward(dy):
            inner = (dy * p).sum(axis=1, keepdims=True)
            return ((p * (dy - inner)) / np.asarray(temperature, dtype=p.dtype),)
        tape.record(p, (x,), backward)
    return p


def l2_loss(a, b, tape: Tape | None = None) -> float:
    """Half squared error averaged over the batch: (1/B) * 1/2 ||a - b||^2."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l2_loss shape mismatch: {a.shape} vs {b.shape}")
    bsz = a.shape[0]
    d = a - b
    loss = float(0.5 * np.sum(d * d) / bsz)
    if tape is not None:
        def backward(d_loss):
            da = d * (d_loss / bsz)
            return da.astype(a.dtype, copy=False), (-da).astype(b.dtype, copy=False)
        tape.record(loss, (a, b), backward)
    return loss


def softmax_xent(logits, targets, temperature: float = 1.0, tape: Tape | None = None) -> float:
    """Cross entropy between softened softmax(logits/T) and soft target rows.

    Scaled by T^2 and averaged over the batch, so gradients keep their
    magnitude as T grows. targets rows are probability vectors.
    """
    logits, targets = np.asarray(logits), np.asarray(targets)
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"softmax_xent shape mismatch: {logits.shape} vs {targets.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(logits).all():
        raise NumericError("softmax_xent logits contain non-finite values")
    t = logits.dtype.type(temperature)
    bsz = logits.shape[0]
    z = logits / t
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-(temperature ** 2) * np.sum(targets * logp) / bsz)
    if tape is not None:
        p = np.exp(logp)
        def backward(d_loss):
            dl = (p - targets) * (d_loss * temperature / bsz)
            return dl.astype(logits.dtype, copy=False), None
        tape.record(loss, (logits, targets), backward)
    return loss


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


# ---------------------------------------------------------------------------
# optimization and verification


def sgd_step(params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
    """One SGD-with-momentum step; resets gradients to zero afterwards.

    velocity <- momentum * velocity + grad + weight_decay * value
    value    <- value - lr * velocity
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter '{p.name}'")
        v = p.velocity
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.value
        if lr:
            p.value -= lr * v
        p.grad[...] = 0


def grad_check(loss_fn, params, eps: float = 1e-3, rng: Rng | None = None,
               max_coords: int = 256) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(tape) must run a forward pass over `params` and return a scalar
    loss; with tape=None it must be a deterministic pure evaluation. At most
    `max_coords` coordinates per parameter are probed, chosen by `rng`.
    Relative error is |g - g_fd| / max(|g|, |g_fd|, 1e-4).
    """
    if rng is None:
        rng = Rng(0).stream("grad-check")
    l0 = loss_fn(None)
    l1 = loss_fn(None)
    if l0 != l1:
        raise NumericError(f"loss is not deterministic: {l0!r} != {l1!r}")

    for p in params:
        p.grad[...] = 0
    tape = Tape()
    tape.watch(*params)
    loss_fn(tape)
    tape.backprop(1.0)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.grad[...] = 0

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.shape[0]
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.stream("coords", p.name).choice(n, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = flat[i]
            lp = loss_fn(None)
            flat[i] = orig - eps
            lo = flat[i]
            lm = loss_fn(None)
            flat[i] = orig
            fd = (lp - lm) / float(hi - lo)
            err = abs(float(gflat[i]) - fd) / max(abs(float(gflat[i])), abs(fd), 1e-4)
            if err > worst:
                worst = err
    return worst

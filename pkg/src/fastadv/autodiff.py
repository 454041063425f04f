"""Reverse-mode automatic differentiation over dense numpy tensors.

Forward values are computed eagerly; every differentiable operation is
recorded on a :class:`Tape`, and :meth:`Tape.backward` replays the records
in reverse to accumulate gradients into the participating tensors.

Supported op set: matmul, bias_add, conv2d, relu, reshape, mean,
elementwise add/sub/mul, softmax_cross_entropy.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = {32: np.float32, 64: np.float64}


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(AutodiffError):
    """A NaN or Inf entered the computation."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


def _im2col(x, kh, kw, stride, padding):
    """Gather conv patches into columns: [n, c*kh*kw, oh*ow]."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, oh * ow, order="C").copy(), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, padding):
    """Scatter-add column gradients back to input layout (inverse of _im2col)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def softmax(logits):
    """Row-wise stable softmax of a 2-d numpy array."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_values(logits, labels):
    """Per-example -log softmax(logits)[label], numerically stabilized.

    Pure numpy helper (no tape); used by attacks and evaluation to rank
    adversarial candidates by loss.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


class Tape:
    """Ordered record of differentiable ops enabling reverse-mode gradients."""

    def __init__(self):
        self._records = []
        self._produced = set()

    # -- recording ---------------------------------------------------------

    def _record(self, kind, inputs, out_data, backward_fn):
        out = Tensor(out_data)
        rec = _Record(kind, tuple(inputs), out, backward_fn)
        self._records.append(rec)
        self._produced.add(id(out))
        return out

    def _needs_grad(self, t):
        return t.requires_grad or id(t) in self._produced

    # -- ops ---------------------------------------------------------------

    def add(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
        return self._record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def sub(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"sub: {a.shape} vs {b.shape}")
        return self._record("sub", (a, b), a.data - b.data, lambda g: (g, -g))

    def mul(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return self._record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))

    def matmul(self, a, b):
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        ad, bd = a.data, b.data
        out = ad @ bd
        _check_finite(out, "matmul output")
        return self._record("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g))

    def bias_add(self, x, b):
        """Add a bias vector over features (2-d x) or channels (4-d x)."""
        if x.data.ndim == 2:
            if b.shape != (x.shape[1],):
                raise ShapeError(f"bias_add: {x.shape} + {b.shape}")
            out = x.data + b.data
            bwd = lambda g: (g, g.sum(axis=0))
        elif x.data.ndim == 4:
            if b.shape != (x.shape[1],):
                raise ShapeError(f"bias_add: {x.shape} + {b.shape}")
            out = x.data + b.data[None, :, None, None]
            bwd = lambda g: (g, g.sum(axis=(0, 2, 3)))
        else:
            raise ShapeError(f"bias_add: unsupported rank {x.data.ndim}")
        return self._record("bias_add", (x, b), out, bwd)

    def conv2d(self, x, w, stride=1, padding=0):
        """2-d convolution (cross-correlation) via patch-gather + matmul.

        x: [n, c, h, w]; w: [oc, c, kh, kw].
        """
        if x.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeError("conv2d expects 4-d input and kernel")
        n, c, h, wid = x.shape
        oc, ic, kh, kw = w.shape
        if ic != c:
            raise ShapeError(f"conv2d: input channels {c} != kernel channels {ic}")
        if h + 2 * padding < kh or wid + 2 * padding < kw:
            raise ShapeError("conv2d: spatial dims smaller than kernel")
        cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
        wmat = w.data.reshape(oc, -1)
        out = np.einsum("of,nfp->nop", wmat, cols).reshape(n, oc, oh, ow)
        _check_finite(out, "conv2d output")
        x_shape = x.shape

        def bwd(g):
            gmat = g.reshape(n, oc, oh * ow)
            gw = np.einsum("nop,nfp->of", gmat, cols).reshape(w.shape)
            gcols = np.einsum("of,nop->nfp", wmat, gmat)
            gx = _col2im(gcols, x_shape, kh, kw, stride, padding)
            return (gx, gw)

        return self._record("conv2d", (x, w), out, bwd)

    def relu(self, x):
        mask = x.data > 0  # gradient at exactly 0 is 0
        return self._record("relu", (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))

    def reshape(self, x, shape):
        orig = x.shape
        return self._record(
            "reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),)
        )

    def flatten(self, x):
        return self.reshape(x, (x.shape[0], -1))

    def mean(self, x):
        n = x.data.size
        shape = x.shape
        return self._record(
            "mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
        )

    def softmax_cross_entropy(self, logits, labels):
        """Mean of -log softmax(logits)[label] over the batch.

        Gradient w.r.t. logits is (softmax - onehot) / batch.
        """
        if logits.data.ndim != 2:
            raise ShapeError("softmax_cross_entropy expects [batch, classes] logits")
        labels = np.asarray(labels)
        if labels.ndim == 0:
            labels = labels[None]
        n, k = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} != ({n},)")
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError(f"label out of range [0, {k})")
        _check_finite(logits.data, "logits")
        losses = cross_entropy_values(logits.data, labels)
        probs = softmax(logits.data)

        def bwd(g):
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            return (grad * (g / n),)

        return self._record(
            "softmax_cross_entropy", (logits,), np.asarray(losses.mean()), bwd
        )

    # -- backward ----------------------------------------------------------

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor."""
        if not self._records:
            raise AutodiffError("backward on empty tape")
        if loss.data.shape != ():
            raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
        if id(loss) not in self._produced:
            raise AutodiffError("loss was not produced by this tape")
        grads = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            input_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, input_grads):
                if gi is None or not self._needs_grad(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for rec in self._records:
            for t in rec.inputs:
                if t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t)).astype(t.dtype, copy=False)
                    t.grad = g if t.grad is None else t.grad + g

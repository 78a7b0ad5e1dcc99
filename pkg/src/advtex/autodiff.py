"""Small reverse-mode autodiff over numpy arrays.

Only the operations needed by the discriminator and the texture renderer are
provided. Tensors hold float32 data by default; passing float64 arrays keeps
float64 throughout, which is what the gradient-check harness relies on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


class Tensor:
    """Dense array node in a differentiation graph.

    ``grad`` is only filled on leaves (tensors created directly with
    ``requires_grad=True``) when :func:`backward` runs.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._parent_needs = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data, parents, backward_fn):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data, dtype=data.dtype)
    needs = tuple(p.requires_grad for p in parents)
    if any(needs):
        out.requires_grad = True
        out._parents = parents
        # frozen at build time, so toggling a flag later cannot leak gradients
        out._parent_needs = needs
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), _bw)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw)


def tsum(a):
    def _bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), _bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def conv_output_size(size, kernel=4, stride=1, padding=1):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias, stride=1, padding=1):
    """2D cross-correlation of a single (C, H, W) image.

    ``weight`` is (C_out, C_in, k, k) and ``bias`` is (C_out,).
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) input and 4D weight, got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in} channels, weight expects {wc_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((c_in, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c_in * kh * kw, ho * wo)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, ho, wo) + bias.data[:, None, None]

    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias.requires_grad

    def _bw(g):
        g2 = g.reshape(c_out, -1)
        gx = gw = gb = None
        if need_w:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if need_b:
            gb = g2.sum(axis=1)
        if need_x:
            # BLAS is slow on (K, 1) @ (1, N); the outer product is not
            gcols = np.outer(wmat[0], g2[0]) if c_out == 1 else wmat.T @ g2
            gcols = gcols.reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    return _make(out.astype(x.dtype, copy=False), (x, weight, bias), _bw)


def leaky_relu(x, negative_slope=0.2):
    if not 0.0 < negative_slope < 1.0:
        raise ValueError("negative_slope must lie in (0, 1)")
    pos = x.data >= 0
    slope = np.where(pos, 1.0, negative_slope).astype(x.dtype)

    def _bw(g):
        return (g * slope,)

    return _make(x.data * slope, (x,), _bw)


def sigmoid(x):
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def _bw(g):
        return (g * s * (1.0 - s),)

    out = _make(s, (x,), _bw)
    out.logits = x  # lets masked_bce_loss differentiate in logit space
    return out


@dataclass
class SamplingPlan:
    """Precomputed bilinear footprint for a fixed coordinate grid.

    Reusing a plan avoids recomputing corner indices when the same mapping is
    sampled every optimization step.
    """

    src_shape: tuple
    out_shape: tuple
    flat_out: np.ndarray
    corners: np.ndarray
    weights: np.ndarray
    out_of_range: int = 0


def make_sampling_plan(src_shape, coords, validity=None):
    """Build a :class:`SamplingPlan` for coords of shape (2, H', W') as (row, col)."""
    h, w = src_shape
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ValueError(f"coords must have shape (2, H', W'), got {coords.shape}")
    out_shape = coords.shape[1:]
    if validity is None:
        validity = np.ones(out_shape, dtype=bool)
    validity = np.asarray(validity, dtype=bool)
    if validity.shape != out_shape:
        raise ValueError(f"validity shape {validity.shape} does not match coords {out_shape}")
    flat_out = np.flatnonzero(validity)
    r = coords[0].ravel()[flat_out]
    c = coords[1].ravel()[flat_out]
    oob = (r < 0) | (r > h - 1) | (c < 0) | (c > w - 1) | ~np.isfinite(r) | ~np.isfinite(c)
    n_oob = int(oob.sum())
    if n_oob:
        logger.debug("bilinear_sample: %d valid coordinates clamped to the border", n_oob)
    r = np.clip(np.nan_to_num(r), 0, h - 1)
    c = np.clip(np.nan_to_num(c), 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.int64), max(w - 2, 0))
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    corners = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1])
    weights = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    return SamplingPlan((h, w), out_shape, flat_out, corners, weights, n_oob)


def bilinear_sample(source, coords=None, validity=None, plan=None):
    """Sample ``source`` (C, H, W) at continuous pixel positions.

    Gradients reach ``source`` only. Invalid output pixels are zero. The
    result carries ``out_of_range``: how many valid coordinates were clamped.
    """
    c, h, w = source.shape
    if plan is None:
        plan = make_sampling_plan((h, w), coords, validity)
    elif plan.src_shape != (h, w):
        raise ValueError(f"sampling plan built for {plan.src_shape}, source is {(h, w)}")
    src = source.data.reshape(c, h * w)
    wts = plan.weights.astype(source.dtype)
    vals = (src[:, plan.corners] * wts[None]).sum(axis=1)
    n_out = plan.out_shape[0] * plan.out_shape[1]
    out = np.zeros((c, n_out), dtype=source.dtype)
    out[:, plan.flat_out] = vals

    def _bw(g):
        gv = g.reshape(c, n_out)[:, plan.flat_out]
        gsrc = np.empty((c, h * w), dtype=g.dtype)
        idx = plan.corners.ravel()
        for ch in range(c):
            contrib = (gv[ch][None, :] * plan.weights).ravel()
            gsrc[ch] = np.bincount(idx, weights=contrib, minlength=h * w)
        return (gsrc.reshape(c, h, w),)

    result = _make(out.reshape((c,) + tuple(plan.out_shape)), (source,), _bw)
    result.out_of_range = plan.out_of_range
    return result


def masked_bce_loss(scores, target_label, weight_mask):
    """Mean binary cross-entropy over entries where ``weight_mask`` is 1.

    Returns ``(loss, n_valid)``. When the mask is empty the loss is a zero
    scalar and ``n_valid`` is 0, which callers treat as "no valid patches".

    If ``scores`` came from :func:`sigmoid`, the loss is computed from the
    logits z as ``softplus(z) - t*z`` with gradient ``sigmoid(z) - t``, so a
    saturated score still gets a gradient. Otherwise scores are clamped to
    ``[BCE_CLAMP, 1 - BCE_CLAMP]`` and clamped entries get no gradient.
    """
    if target_label not in (0, 1, 0.0, 1.0):
        raise ValueError("target_label must be 0 or 1")
    mask = np.asarray(weight_mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    n = int(mask.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=scores.dtype), dtype=scores.dtype), 0
    t = float(target_label)
    logits = getattr(scores, "logits", None)
    if logits is not None:
        z = logits.data
        terms = np.logaddexp(0.0, z) - t * z
        loss = np.asarray((terms * mask).sum() / n, dtype=scores.dtype)

        def _bw_logits(g):
            return ((g * (scores.data - t) * mask / n).astype(scores.dtype),)

        return _make(loss, (logits,), _bw_logits), n
    s = np.clip(scores.data, BCE_CLAMP, 1 - BCE_CLAMP)
    terms = -(t * np.log(s) + (1 - t) * np.log(1 - s))
    loss = np.asarray((terms * mask).sum() / n, dtype=scores.dtype)
    # clamped entries contribute no gradient
    inside = (scores.data > BCE_CLAMP) & (scores.data < 1 - BCE_CLAMP)

    def _bw(g):
        d = -(t / s) + (1 - t) / (1 - s)
        return ((g * d * mask * inside / n).astype(scores.dtype),)

    return _make(loss, (scores,), _bw), n


def l1_loss(a, b, mask=None):
    """Mean absolute difference over entries where ``mask`` is 1.

    ``mask`` may have the spatial shape of ``a`` (broadcast over channels).
    Returns ``(loss, n_valid)``; gradients flow to ``a`` only.
    """
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    n = int(mask.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=a.dtype), dtype=a.dtype), 0
    diff = a.data - b
    loss = np.asarray(np.abs(diff)[mask].sum() / n, dtype=a.dtype)

    def _bw(g):
        return ((g * np.sign(diff) * mask / n).astype(a.dtype),)

    return _make(loss, (a,), _bw), n


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, need in zip(node._parents, node._parent_needs):
            if need and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is left intact, so calling twice doubles the leaf gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, need, pg in zip(node._parents, node._parent_needs, node._backward(g)):
            if pg is None or not need:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)


def adam_step(param, state):
    """One bias-corrected Adam update in place; clears ``param.grad``."""
    if param.grad is None:
        raise ValueError("adam_step called on a parameter without a gradient")
    g = param.grad.astype(np.float64)
    if state.first_moment is None:
        state.first_moment = np.zeros(param.shape, dtype=np.float64)
        state.second_moment = np.zeros(param.shape, dtype=np.float64)
    if state.first_moment.shape != param.shape:
        raise ValueError(f"Adam moments shaped {state.first_moment.shape} for parameter {param.shape}")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = state.first_moment / (1 - state.beta1 ** t)
    v_hat = state.second_moment / (1 - state.beta2 ** t)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.data -= update.astype(param.dtype)
    param.grad = None


class Adam:
    """Adam over a list of leaf tensors, one :class:`AdamState` each."""

    def __init__(self, params, lr=1e-3, betas=(0.5, 0.999), eps=1e-8):
        self.params = list(params)
        self.states = [AdamState(lr, betas[0], betas[1], eps) for _ in self.params]

    def step(self):
        for p, s in zip(self.params, self.states):
            if p.grad is not None:
                adam_step(p, s)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

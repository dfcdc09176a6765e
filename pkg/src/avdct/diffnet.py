"""Differentiable layers with hand-written backward passes.

Tensors are plain float64 numpy arrays. Every layer accepts arbitrary
leading batch axes; parameter gradients are summed over whatever axes the
parameter was broadcast across.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DivergenceError, InvalidInputError, InvalidParameterError


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def sign(x):
    # np.sign already maps 0 -> 0, which keeps the dead zone exact
    return np.sign(x)


# -- linear -----------------------------------------------------------------


def linear(x, w, b):
    """``y = x @ w + b`` along the last axis.

    ``w`` may carry leading axes (one matrix per channel); they are matched
    against the trailing batch axes of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if w.shape[-2] != x.shape[-1] or b.shape[-1] != w.shape[-1]:
        raise InvalidInputError(
            f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    if w.ndim == 2:
        return x @ w + b
    return (x[..., None, :] @ w)[..., 0, :] + b


def linear_backward(g, x, w):
    """Return ``(grad_x, grad_w, grad_b)``; ``grad_b`` has the bias shape."""
    if w.ndim == 2:
        gx = g @ w.T
        gf = g.reshape(-1, g.shape[-1])
        gw = x.reshape(-1, x.shape[-1]).T @ gf
        return gx, gw, gf.sum(axis=0)
    gx = (g[..., None, :] @ np.swapaxes(w, -1, -2))[..., 0, :]
    gw = _reduce_to(x[..., :, None] * g[..., None, :], w.shape)
    gb = _reduce_to(g, w.shape[:-2] + w.shape[-1:])
    return gx, gw, gb


# -- hard threshold ---------------------------------------------------------


def hard_threshold(x, t):
    """Keep ``x`` where ``|x| > t`` and zero it elsewhere.

    This is soft-thresholding followed by adding back ``t * sign``, which for
    non-negative ``t`` collapses to a pure dead zone with no shrinkage.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise InvalidParameterError("thresholds must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) > t, x, 0.0)


def hard_threshold_backward(g, x, t):
    """Return ``(grad_x, grad_t)``.

    The threshold gradient treats the sign-restoration term as constant, so
    ``d out / d t = -sign(x)`` on the pass band and 0 in the dead zone.
    """
    t = np.asarray(t, dtype=np.float64)
    mask = np.abs(x) > t
    gx = np.where(mask, g, 0.0)
    gt = _reduce_to(np.where(mask, -g * sign(x), 0.0), t.shape)
    return gx, gt


# -- scale ------------------------------------------------------------------


def scale(x, v):
    x = np.asarray(x, dtype=np.float64)
    try:
        np.broadcast_shapes(x.shape, v.shape)
    except ValueError:
        raise InvalidInputError(f"scale shape mismatch: x {x.shape}, v {v.shape}") from None
    if v.shape[-1] != x.shape[-1]:
        raise InvalidInputError(f"scale shape mismatch: x {x.shape}, v {v.shape}")
    return x * v


def scale_backward(g, x, v):
    return g * v, _reduce_to(g * x, v.shape)


# -- 1x1 fusion convolution ---------------------------------------------------


def conv1x1(y_stack, w):
    """Fuse ``N`` subband rows (axis -2) into one row with weights ``w``."""
    y_stack = np.asarray(y_stack, dtype=np.float64)
    if y_stack.ndim < 2 or y_stack.shape[-2] != w.shape[-1]:
        raise InvalidInputError(
            f"conv1x1 shape mismatch: stack {y_stack.shape}, w {w.shape}"
        )
    return (y_stack * w[..., :, None]).sum(axis=-2)


def conv1x1_backward(g, y_stack, w):
    gy = g[..., None, :] * w[..., :, None]
    gw = _reduce_to((g[..., None, :] * y_stack).sum(axis=-1), w.shape)
    return gy, gw


# -- multi-head attention -----------------------------------------------------


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class MhaParams:
    """Per-head projections ``(h, C, D)``, shared biases ``(D,)``, output ``(C, C)``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray

    names = ("wq", "wk", "wv", "bq", "bk", "bv", "wo")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def channels(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def init(cls, C: int, h: int = 4, rng=None) -> "MhaParams":
        """Fan-in uniform projections, zero biases and a zero output matrix."""
        if h < 1 or C % h:
            raise ConfigError(f"channel count {C} is not divisible by {h} heads")
        rng = np.random.default_rng(rng)
        D = C // h
        bound = 1.0 / math.sqrt(C)
        proj = [rng.uniform(-bound, bound, size=(h, C, D)) for _ in range(3)]
        zeros = np.zeros(D)
        return cls(*proj, zeros.copy(), zeros.copy(), zeros.copy(), np.zeros((C, C)))

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in self.names}

    def validate(self):
        h, C, D = self.wq.shape
        if C % h or C // h != D:
            raise ConfigError(f"channel count {C} is not divisible by {h} heads")
        for n in ("wk", "wv"):
            if getattr(self, n).shape != (h, C, D):
                raise ConfigError(f"{n} has shape {getattr(self, n).shape}, expected {(h, C, D)}")
        for n in ("bq", "bk", "bv"):
            if getattr(self, n).shape != (D,):
                raise ConfigError(f"{n} has shape {getattr(self, n).shape}, expected {(D,)}")
        if self.wo.shape != (C, C):
            raise ConfigError(f"wo has shape {self.wo.shape}, expected {(C, C)}")


def mha_forward(s, p: MhaParams):
    """Multi-head attention over the rows of ``s`` (shape ``(..., L, C)``).

    Returns ``(out, cache)``; the residual connection is the caller's job.
    """
    p.validate()
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != p.channels:
        raise ConfigError(f"feature map has {s.shape[-1]} columns, attention expects {p.channels}")
    h, C, D = p.wq.shape
    q = np.einsum("...lc,hcd->...hld", s, p.wq) + p.bq
    k = np.einsum("...lc,hcd->...hld", s, p.wk) + p.bk
    v = np.einsum("...lc,hcd->...hld", s, p.wv) + p.bv
    att = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(D))
    heads = att @ v
    L = s.shape[-2]
    concat = np.moveaxis(heads, -3, -2).reshape(s.shape[:-2] + (L, C))
    out = concat @ p.wo
    return out, (s, q, k, v, att, concat)


def mha(s, p: MhaParams):
    return mha_forward(s, p)[0]


def mha_backward(g, cache, p: MhaParams):
    """Return ``(grad_s, grads)`` where ``grads`` is keyed like :class:`MhaParams`."""
    s, q, k, v, att, concat = cache
    h, C, D = p.wq.shape
    L = s.shape[-2]
    gconcat = g @ p.wo.T
    gwo = concat.reshape(-1, C).T @ g.reshape(-1, C)
    gheads = np.moveaxis(gconcat.reshape(s.shape[:-2] + (L, h, D)), -2, -3)
    gatt = gheads @ np.swapaxes(v, -1, -2)
    gv = np.swapaxes(att, -1, -2) @ gheads
    gscores = att * (gatt - (gatt * att).sum(axis=-1, keepdims=True))
    gscores /= math.sqrt(D)
    gq = gscores @ k
    gk = np.swapaxes(gscores, -1, -2) @ q
    grads = {"wo": gwo}
    gs = np.zeros_like(s)
    s_flat = s.reshape(-1, L, C)
    for name, gproj, w in (("q", gq, p.wq), ("k", gk, p.wk), ("v", gv, p.wv)):
        grads["w" + name] = np.einsum("blc,bhld->hcd", s_flat, gproj.reshape(-1, h, L, D))
        grads["b" + name] = gproj.reshape(-1, D).sum(axis=0)
        gs += np.einsum("...hld,hcd->...lc", gproj, w)
    return gs, grads


# -- AdamW ------------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState):
    """One decoupled-weight-decay Adam update.

    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = theta
            if name in state.m:
                new_m[name], new_v[name] = state.m[name], state.v[name]
            continue
        if g.shape != theta.shape:
            raise InvalidInputError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        decayed = theta * (1.0 - state.lr * state.weight_decay)
        new_params[name] = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self):
        rows = [f"{name}: {err:.3e}" for name, err in sorted(self.errors.items())]
        status = "ok" if self.passed else "FAIL"
        return f"grad check {status} (max {self.max_rel_err:.3e})\n  " + "\n  ".join(rows)


def grad_check(
    fn,
    inputs: dict,
    analytic: dict,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    surrogate: dict | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn(inputs)`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps round-off in near-zero gradients from reading as failure.
    Names in ``surrogate`` are not differenced; their analytic gradient must
    equal the supplied surrogate exactly (error 0 or inf).
    """
    surrogate = surrogate or {}
    errors = {}
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    for name, expected in surrogate.items():
        same = np.array_equal(np.asarray(analytic[name]), np.asarray(expected))
        errors[name] = 0.0 if same else math.inf
    for name, a in analytic.items():
        if name in surrogate:
            continue
        arr = work[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(work)
            flat[i] = orig - step
            fm = fn(work)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        a = np.asarray(a, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return GradCheckReport(errors, tolerance)

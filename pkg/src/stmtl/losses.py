"""Training objectives: cross-entropy, BCE, entropic Sinkhorn OT and their fusion."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor, ops

BCE_CLAMP = 1e-7
DEFAULT_ALPHA = 0.3
DEFAULT_EPS = 0.1
DEFAULT_ITERS = 50
DOWNSAMPLE = 4


# -- classification ------------------------------------------------------------------

def cross_entropy_multiclass(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]``.

    ``logits`` is [N,K,H,W]; ``target`` holds class indices of shape [N,H,W].
    """
    target = np.asarray(target)
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if target.min() < 0 or target.max() >= k:
        raise ContractError(f"class index outside [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, target[:, None].astype(np.int64), 1.0, axis=1)
    m = n * h * w
    value = -(logp * onehot).sum() / m
    soft = e / s

    def backward(g):
        return ((soft - onehot) * (g / m),)

    return Tensor.from_op(np.asarray(value, dtype=z.dtype), (logits,), backward)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [1e-7, 1-1e-7]."""
    t = np.asarray(getattr(target, "data", target), dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    raw = pred.data
    p = np.clip(raw, BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (raw >= BCE_CLAMP) & (raw <= 1 - BCE_CLAMP)
    value = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    m = raw.size

    def backward(g):
        return (g * inside * ((p - t) / (p * (1 - p))) / m,)

    return Tensor.from_op(np.asarray(value, dtype=raw.dtype), (pred,), backward)


# -- optimal transport -----------------------------------------------------------------

@dataclass
class ProbMap:
    """Nonnegative weights over an h x w pixel grid (optionally batched)."""

    weights: Tensor
    total: float

    @classmethod
    def normalize(cls, x: Tensor) -> "ProbMap":
        return cls(to_prob_map(x), 1.0)


@dataclass
class TransportPlan:
    gamma: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray


@dataclass
class SinkhornResult:
    value: Tensor        # <gamma, C> - eps * H(gamma), per batch element
    transport: Tensor    # <gamma, C>, per batch element
    plan: Optional[TransportPlan] = None


def to_prob_map(x: Tensor) -> Tensor:
    """Normalize the last two axes to unit mass.

    Negative entries are removed by shifting the map so its minimum is 0;
    nonnegative maps are only rescaled.  A zero-sum map becomes uniform.
    """
    flat = ops.reshape(x, x.shape[:-2] + (-1,))
    shift = np.minimum(flat.data.min(axis=-1, keepdims=True), 0)
    if np.any(shift < 0):
        flat = ops.sub(flat, Tensor(shift))
    zero = flat.data.sum(axis=-1, keepdims=True) <= 0
    if np.any(zero):
        flat = ops.add(flat, Tensor(np.broadcast_to(zero.astype(flat.data.dtype), flat.shape).copy()))
    out = ops.div(flat, ops.sum(flat, axis=-1, keepdims=True))
    return ops.reshape(out, x.shape)


@lru_cache(maxsize=16)
def grid_cost(h: int, w: int) -> np.ndarray:
    """Euclidean distances between pixel centres of an h x w grid, row-major order."""
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    d.setflags(write=False)
    return d


def _lse(z: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp along ``axis`` and the matching softmax."""
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    return (np.log(s) + m).squeeze(axis), e / s


def _safe_log(a: np.ndarray) -> np.ndarray:
    tiny = np.finfo(a.dtype).tiny
    return np.log(np.maximum(a, tiny))


# kernel-domain scaling stays well inside f64 range while max(C)/eps is below this
KERNEL_DOMAIN_LIMIT = 300.0


def eps_schedule(eps: float, iters: int, c_max: float) -> np.ndarray:
    """Per-sweep regularization.

    Stiff problems (``c_max / eps`` above the kernel-domain limit) anneal
    geometrically from ``c_max`` down to ``eps`` over the first half of the
    sweeps and finish at ``eps``; plain scaling stalls there.  Otherwise every
    sweep uses ``eps``.
    """
    sched = np.full(iters, float(eps))
    n_anneal = iters // 2
    if c_max / eps > KERNEL_DOMAIN_LIMIT and n_anneal > 0:
        k = np.arange(n_anneal)
        sched[:n_anneal] = c_max * (eps / c_max) ** (k / n_anneal)
    return sched


def _sinkhorn_log(la, lb, C, eps, iters):
    sched = eps_schedule(eps, iters, float(C.max()))
    g = np.zeros((la.shape[0], C.shape[1]))
    fs, gs = [], []
    for e in sched:
        r, _ = _lse((g[:, None, :] - C) / e, axis=2)
        f = e * (la - r)
        c, _ = _lse((f[:, :, None] - C) / e, axis=1)
        g = e * (lb - c)
        fs.append(f)
        gs.append(g)
    inv = 1.0 / eps
    L = (f[:, :, None] + g[:, None, :] - C) * inv
    gamma = np.exp(L)

    def grad_logs(G):
        """Pull d/d(log gamma) back to d/d(log a), d/d(log b)."""
        bar_f = G.sum(axis=2) * inv
        bar_g = G.sum(axis=1) * inv
        bar_la = np.zeros_like(la)
        bar_lb = np.zeros_like(lb)
        for k in range(iters - 1, -1, -1):
            e = sched[k]
            # column update: g_k = e*lb - e*LSE_i((f_k - C)/e)
            _, Q = _lse((fs[k][:, :, None] - C) / e, axis=1)
            bar_lb += e * bar_g
            bar_f = bar_f - (Q * bar_g[:, None, :]).sum(axis=2)
            # row update: f_k = e*la - e*LSE_j((g_{k-1} - C)/e)
            g_prev = gs[k - 1] if k > 0 else np.zeros_like(bar_g)
            _, P = _lse((g_prev[:, None, :] - C) / e, axis=2)
            bar_la += e * bar_f
            bar_g = -(P * bar_f[:, :, None]).sum(axis=1)
            bar_f = np.zeros_like(bar_f)
        return bar_la, bar_lb

    return gamma, L, grad_logs


def _sinkhorn_kernel(a, b, C, eps, iters):
    K = np.exp(-C / eps)
    v = np.ones((a.shape[0], C.shape[1]))
    us, vs, ss, ts = [], [], [], []
    for _ in range(iters):
        s = v @ K.T
        u = a / s
        t = u @ K
        v = b / t
        us.append(u)
        vs.append(v)
        ss.append(s)
        ts.append(t)
    L = _safe_log(u)[:, :, None] + _safe_log(v)[:, None, :] - C / eps
    gamma = u[:, :, None] * K * v[:, None, :]

    def grad_logs(G):
        # G = d/d(log gamma); d(log gamma_ij)/du_i = 1/u_i, so bar_u = rowsum(G)/u
        bar_u = np.where(u > 0, G.sum(axis=2) / np.where(u > 0, u, 1), 0)
        bar_v = np.where(v > 0, G.sum(axis=1) / np.where(v > 0, v, 1), 0)
        bar_a = np.zeros_like(a)
        bar_b = np.zeros_like(b)
        for k in range(iters - 1, -1, -1):
            u_k, v_k, s_k, t_k = us[k], vs[k], ss[k], ts[k]
            bar_b += bar_v / t_k
            bar_t = -bar_v * v_k / t_k
            bar_u = bar_u + bar_t @ K.T
            bar_a += bar_u / s_k
            bar_s = -bar_u * u_k / s_k
            bar_v = bar_s @ K
            bar_u = np.zeros_like(bar_u)
        # convert to d/d(log a), d/d(log b) for a shared interface
        return bar_a * a, bar_b * b

    return gamma, L, grad_logs


def sinkhorn(a: Tensor, b: Tensor, cost: np.ndarray, eps: float = DEFAULT_EPS, iters: int = DEFAULT_ITERS,
             return_plan: bool = False, domain: str = "auto") -> SinkhornResult:
    """Sinkhorn scaling between batched histograms ``a`` [B,n] and ``b`` [B,m].

    Each sweep updates the row potential, then the column potential,
    starting from a zero column potential.  ``domain="log"`` runs the
    log-sum-exp form; ``"kernel"`` runs the equivalent multiplicative form,
    which is much cheaper but only safe while ``max(C)/eps`` is moderate.
    ``"auto"`` picks the kernel form when it is safe.  Beyond that limit the
    log form anneals eps (see :func:`eps_schedule`).  Arithmetic is f64
    internally.  Gradients with respect to ``a`` and ``b`` are exact for the
    unrolled iteration; entries with zero mass get zero gradient.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"sinkhorn expects [B,n] and [B,m] histograms, got {a.shape} and {b.shape}")
    C = np.asarray(cost, dtype=np.float64)
    if C.shape != (a.shape[1], b.shape[1]):
        raise ShapeError(f"cost {C.shape} does not match supports {a.shape[1]}, {b.shape[1]}")
    if domain == "auto":
        domain = "kernel" if C.max() / eps <= KERNEL_DOMAIN_LIMIT else "log"
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    if not (np.all(np.isfinite(ad)) and np.all(np.isfinite(bd))):
        raise NumericError("non-finite histogram entry")
    if domain == "kernel":
        gamma, L, grad_logs = _sinkhorn_kernel(ad, bd, C, eps, iters)
    elif domain == "log":
        gamma, L, grad_logs = _sinkhorn_log(_safe_log(ad), _safe_log(bd), C, eps, iters)
    else:
        raise ContractError(f"unknown sinkhorn domain {domain!r}")
    if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(L))):
        raise NumericError("non-finite transport plan")
    transport = (gamma * C).sum(axis=(1, 2))
    ent = (gamma * L).sum(axis=(1, 2))
    value = transport + eps * ent
    dt = a.data.dtype
    packed = np.stack([value, transport], axis=1).astype(dt)

    def backward(gout):
        gout = gout.astype(np.float64)
        w_val, w_tr = gout[:, 0], gout[:, 1]
        wT = (w_val + w_tr)[:, None, None]
        wE = (eps * w_val)[:, None, None]
        # d(objective)/d(log gamma)
        G = gamma * (wT * C + wE * (L + 1))
        bar_la, bar_lb = grad_logs(G)
        tiny = np.finfo(np.float64).tiny
        ga = np.where(ad > tiny, bar_la / np.maximum(ad, tiny), 0).astype(dt) if a.requires_grad else None
        gb = np.where(bd > tiny, bar_lb / np.maximum(bd, tiny), 0).astype(dt) if b.requires_grad else None
        return ga, gb

    out = Tensor.from_op(packed, (a, b), backward)
    plan = None
    if return_plan:
        plan = TransportPlan(gamma, gamma.sum(axis=2), gamma.sum(axis=1))
    return SinkhornResult(ops.index(out, (slice(None), 0)), ops.index(out, (slice(None), 1)), plan)


def _check_prob(x: Tensor, what: str) -> None:
    tol = 1e-9 if x.data.dtype == np.float64 else 1e-5
    if np.any(x.data < 0):
        raise ContractError(f"{what} has negative mass")
    sums = x.data.reshape(*x.shape[:-2], -1).sum(axis=-1) if x.ndim >= 2 else x.data.sum()
    if np.any(np.abs(sums - 1) > tol):
        raise ContractError(f"{what} is not normalized (sum {np.ravel(sums)[0]:.6g})")


def sinkhorn_distance(mu, nu, eps: float = DEFAULT_EPS, iters: int = DEFAULT_ITERS,
                      return_plan: bool = False) -> SinkhornResult:
    """Entropic OT between normalized maps on a pixel grid.

    ``mu`` and ``nu`` are [h,w] or [B,h,w] tensors (or :class:`ProbMap`) whose
    last two axes each sum to one.  The ground cost is the Euclidean distance
    between pixel centres.
    """
    mu = getattr(mu, "weights", mu)
    nu = getattr(nu, "weights", nu)
    if mu.shape != nu.shape or mu.ndim not in (2, 3):
        raise ShapeError(f"sinkhorn_distance: maps {mu.shape} and {nu.shape} must match, rank 2 or 3")
    _check_prob(mu, "mu")
    _check_prob(nu, "nu")
    h, w = mu.shape[-2:]
    a = ops.reshape(mu, (-1, h * w))
    b = ops.reshape(nu, (-1, h * w))
    res = sinkhorn(a, b, grid_cost(h, w), eps=eps, iters=iters, return_plan=return_plan)
    if mu.ndim == 2:
        res = SinkhornResult(ops.reshape(res.value, ()), ops.reshape(res.transport, ()), res.plan)
    return res


def exact_ot_oracle(mu_w, mu_pts, nu_w, nu_pts, cost=None, max_support: int = 10) -> float:
    """Exact optimal transport cost between two small discrete measures by linear programming."""
    mu_w = np.asarray(mu_w, dtype=np.float64)
    nu_w = np.asarray(nu_w, dtype=np.float64)
    n, m = len(mu_w), len(nu_w)
    if n > max_support or m > max_support:
        raise ContractError(f"support too large for the exact oracle ({n}x{m} > {max_support})")
    if cost is None:
        p = np.asarray(mu_pts, dtype=np.float64).reshape(n, -1)
        q = np.asarray(nu_pts, dtype=np.float64).reshape(m, -1)
        cost = np.sqrt(((p[:, None] - q[None]) ** 2).sum(-1))
    cost = np.asarray(cost, dtype=np.float64)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        a_eq[n + j, j::m] = 1
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([mu_w, nu_w]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericError(f"transport LP failed: {res.message}")
    return float(res.fun)


# -- fused saliency objective ---------------------------------------------------------------

def saliency_loss(pred: Tensor, target, alpha: float = DEFAULT_ALPHA, eps: float = DEFAULT_EPS,
                  iters: int = DEFAULT_ITERS) -> Tensor:
    """``alpha * Sinkhorn(down4(target), down4(pred)) + (1 - alpha) * BCE(pred, target)``.

    The Sinkhorn term is averaged over the batch.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    if t.shape != pred.shape:
        raise ShapeError(f"saliency_loss: pred {pred.shape} vs target {t.shape}")
    terms = []
    if alpha > 0:
        terms.append(ops.scale(sinkhorn_term(pred, t, eps, iters), alpha))
    if alpha < 1:
        terms.append(ops.scale(bce_loss(pred, t), 1.0 - alpha))
    return terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])


def sinkhorn_term(pred: Tensor, target: Tensor, eps: float = DEFAULT_EPS, iters: int = DEFAULT_ITERS) -> Tensor:
    n = pred.shape[0]
    h, w = pred.shape[-2:]
    p = ops.reshape(ops.avg_downsample(pred, DOWNSAMPLE), (n, h // DOWNSAMPLE, w // DOWNSAMPLE))
    q = ops.reshape(ops.avg_downsample(target, DOWNSAMPLE), (n, h // DOWNSAMPLE, w // DOWNSAMPLE))
    res = sinkhorn_distance(to_prob_map(q), to_prob_map(p), eps=eps, iters=iters)
    return ops.mean(res.value)

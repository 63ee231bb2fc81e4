"""Dense numerical kernel: normalization, similarity, softmax, pre-LN
transformer blocks with exact analytic backward passes, divergences, and
finite-difference gradient verification.

Everything is float64 and pure-numpy. Blocks come in three flavors:

* ``transformer_block``       single sequence pair, forward only
* ``transformer_block_fwd``   same, returning a cache for the backward pass
* ``transformer_block_bwd``   exact gradients w.r.t. inputs and every tensor
* ``transformer_block_batch`` forward over a leading batch axis (inference)

The backward pass is hand-derived (layer norm included in full, not the
diagonal approximation); ``grad_check`` is the verification harness used by
the test suite and the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    DimMismatch,
    NonFiniteLoss,
    NonPositiveTemperature,
    NotADistribution,
    ZeroVector,
)
from .rng import Stream

_NORM_FLOOR = 1e-12
_LN_EPS = 1e-5


# --------------------------------------------------------------------------
# elementary operations
# --------------------------------------------------------------------------

def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm. Raises ZeroVector below 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ZeroVector("empty vector")
    n = float(np.linalg.norm(v))
    if n < _NORM_FLOOR:
        raise ZeroVector(f"norm {n:g} below {_NORM_FLOOR:g}")
    return v / n


def normalize_rows(A: np.ndarray) -> np.ndarray:
    """Unit-normalize each row; ZeroVector if any row is degenerate."""
    A = np.asarray(A, dtype=np.float64)
    norms = np.linalg.norm(A, axis=-1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise ZeroVector("zero row in matrix")
    return A / norms


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities: entry (i, j) = cos(A[i], B[j])."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    return normalize_rows(A) @ normalize_rows(B).T


def softmax(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax of a vector.

    The max is subtracted before the temperature division, so any finite
    input survives even sub-unit temperatures without overflow.
    """
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature {temperature!r}")
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        e = np.exp((x - np.max(x)) / temperature)
    return e / e.sum()


def softmax_rows(X: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax; same stabilization as `softmax`."""
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature {temperature!r}")
    X = np.asarray(X, dtype=np.float64)
    with np.errstate(over="ignore"):
        e = np.exp((X - X.max(axis=-1, keepdims=True)) / temperature)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats; q is clamped at 1e-12 before the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimMismatch(f"shapes differ: {p.shape} vs {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if abs(float(dist.sum()) - 1.0) > 1e-6:
            raise NotADistribution(f"{name} sums to {dist.sum():.9f}")
        if np.any(dist < -1e-9):
            raise NotADistribution(f"{name} has negative entries")
    qc = np.maximum(q, 1e-12)
    terms = np.where(p > 0.0, p * (np.log(np.maximum(p, 1e-300)) - np.log(qc)), 0.0)
    return float(terms.sum())


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


# --------------------------------------------------------------------------
# layer norm with exact backward
# --------------------------------------------------------------------------

def layer_norm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_bwd(cache, dy: np.ndarray):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


# --------------------------------------------------------------------------
# transformer block parameters
# --------------------------------------------------------------------------

TENSOR_ORDER = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "w1", "b1", "w2", "b2",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
)


@dataclass
class TransformerBlockParams:
    """Weights of one pre-LN block: shared-LN attention then GELU FFN.

    Projection matrices are stored combined over heads ((d, d) each); head h
    owns columns [h*dh, (h+1)*dh). ln1 normalizes both the query and the
    key/value inputs; ln2 precedes the FFN.
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.n_heads != 0:
            raise DimMismatch(f"width {d} not divisible by {self.n_heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise DimMismatch(f"{name} must be ({d}, {d})")
        hidden = self.w1.shape[1]
        if self.w1.shape != (d, hidden) or self.w2.shape != (hidden, d):
            raise DimMismatch("FFN weight shapes inconsistent")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    def tensors(self):
        """Fixed-order (name, array) pairs; the order is the wire order."""
        return [(name, getattr(self, name)) for name in TENSOR_ORDER]

    def n_params(self) -> int:
        return sum(int(a.size) for _, a in self.tensors())

    def copy(self) -> "TransformerBlockParams":
        kw = {name: getattr(self, name).copy() for name in TENSOR_ORDER}
        return TransformerBlockParams(n_heads=self.n_heads, **kw)

    def to_bytes(self) -> bytes:
        """Concatenated float64 little-endian tensor bytes, wire order."""
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in self.tensors())

    @classmethod
    def zeros(cls, d: int, n_heads: int, ffn_mult: int = 2) -> "TransformerBlockParams":
        h = ffn_mult * d
        return cls(
            wq=np.zeros((d, d)), bq=np.zeros(d),
            wk=np.zeros((d, d)), bk=np.zeros(d),
            wv=np.zeros((d, d)), bv=np.zeros(d),
            wo=np.zeros((d, d)), bo=np.zeros(d),
            w1=np.zeros((d, h)), b1=np.zeros(h),
            w2=np.zeros((h, d)), b2=np.zeros(d),
            ln1_g=np.zeros(d), ln1_b=np.zeros(d),
            ln2_g=np.zeros(d), ln2_b=np.zeros(d),
            n_heads=n_heads,
        )

    @classmethod
    def random(cls, d: int, n_heads: int, stream: Stream,
               ffn_mult: int = 2, scale: float = 0.05) -> "TransformerBlockParams":
        """Small random weights (std scale/sqrt(d)), unit LN scales, zero biases."""
        h = ffn_mult * d
        s = scale / np.sqrt(d)
        return cls(
            wq=s * stream.normals(d, d), bq=np.zeros(d),
            wk=s * stream.normals(d, d), bk=np.zeros(d),
            wv=s * stream.normals(d, d), bv=np.zeros(d),
            wo=s * stream.normals(d, d), bo=np.zeros(d),
            w1=s * stream.normals(d, h), b1=np.zeros(h),
            w2=s * stream.normals(h, d), b2=np.zeros(d),
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            n_heads=n_heads,
        )


def block_param_count(d: int, ffn_mult: int = 2) -> int:
    """Analytic tensor-entry count of one block (head count drops out)."""
    return (4 + 2 * ffn_mult) * d * d + ffn_mult * d + 9 * d


# --------------------------------------------------------------------------
# transformer block: forward, cached forward, backward, batched forward
# --------------------------------------------------------------------------

def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (..., L, d) -> (..., H, L, dh)
    *lead, L, d = x.shape
    dh = d // n_heads
    return x.reshape(*lead, L, n_heads, dh).swapaxes(-2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # (..., H, L, dh) -> (..., L, d)
    *lead, H, L, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, H * dh)


def transformer_block_fwd(Q: np.ndarray, KV: np.ndarray, p: TransformerBlockParams):
    """Pre-LN block: attention(LN(Q), LN(KV)) + Q, then FFN(LN(.)) + residual.

    Returns (output (q, d), cache) where the cache carries every intermediate
    needed for the exact backward pass.
    """
    Q = np.asarray(Q, dtype=np.float64)
    KV = np.asarray(KV, dtype=np.float64)
    d = p.d_model
    if Q.shape[-1] != d or KV.shape[-1] != d:
        raise DimMismatch(f"inputs must have width {d}")
    dh = d // p.n_heads
    scale = 1.0 / np.sqrt(dh)

    Qn, ln_q = layer_norm_fwd(Q, p.ln1_g, p.ln1_b)
    KVn, ln_kv = layer_norm_fwd(KV, p.ln1_g, p.ln1_b)

    qh = _split_heads(Qn @ p.wq + p.bq, p.n_heads)      # (H, q, dh)
    kh = _split_heads(KVn @ p.wk + p.bk, p.n_heads)     # (H, n, dh)
    vh = _split_heads(KVn @ p.wv + p.bv, p.n_heads)
    S = (qh @ kh.swapaxes(-1, -2)) * scale              # (H, q, n)
    A = softmax_rows(S)
    oh = A @ vh                                         # (H, q, dh)
    O = _merge_heads(oh)                                # (q, d)
    attn = O @ p.wo + p.bo
    T = attn + Q

    Tn, ln_t = layer_norm_fwd(T, p.ln2_g, p.ln2_b)
    H1 = Tn @ p.w1 + p.b1
    G = gelu(H1)
    F = G @ p.w2 + p.b2
    Y = F + T

    cache = (p, Qn, KVn, ln_q, ln_kv, qh, kh, vh, A, O, Tn, ln_t, H1, G, scale)
    return Y, cache


def transformer_block_bwd(cache, dY: np.ndarray):
    """Exact gradients of a cached forward pass.

    Returns (dQ, dKV, grads) with grads keyed by TENSOR_ORDER names.
    """
    p, Qn, KVn, ln_q, ln_kv, qh, kh, vh, A, O, Tn, ln_t, H1, G, scale = cache
    grads = {}

    dF = dY
    dT = dY.copy()
    grads["w2"] = G.T @ dF
    grads["b2"] = dF.sum(axis=0)
    dH1 = (dF @ p.w2.T) * gelu_grad(H1)
    grads["w1"] = Tn.T @ dH1
    grads["b1"] = dH1.sum(axis=0)
    dTn = dH1 @ p.w1.T
    dT_ln, grads["ln2_g"], grads["ln2_b"] = layer_norm_bwd(ln_t, dTn)
    dT += dT_ln

    # T = attn + Q
    d_attn = dT
    dQ = dT.copy()
    grads["wo"] = O.T @ d_attn
    grads["bo"] = d_attn.sum(axis=0)
    dO = d_attn @ p.wo.T
    doh = _split_heads(dO, p.n_heads)                    # (H, q, dh)

    dA = doh @ vh.swapaxes(-1, -2)                       # (H, q, n)
    dvh = A.swapaxes(-1, -2) @ doh                       # (H, n, dh)
    dS = (dA - (dA * A).sum(axis=-1, keepdims=True)) * A
    dqh = (dS @ kh) * scale
    dkh = (dS.swapaxes(-1, -2) @ qh) * scale

    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    grads["wq"] = Qn.T @ dq
    grads["bq"] = dq.sum(axis=0)
    grads["wk"] = KVn.T @ dk
    grads["bk"] = dk.sum(axis=0)
    grads["wv"] = KVn.T @ dv
    grads["bv"] = dv.sum(axis=0)

    dQn = dq @ p.wq.T
    dKVn = dk @ p.wk.T + dv @ p.wv.T
    dQ_ln, dg_q, db_q = layer_norm_bwd(ln_q, dQn)
    dKV, dg_kv, db_kv = layer_norm_bwd(ln_kv, dKVn)
    grads["ln1_g"] = dg_q + dg_kv
    grads["ln1_b"] = db_q + db_kv
    dQ += dQ_ln
    return dQ, dKV, grads


def transformer_block(Q: np.ndarray, KV: np.ndarray, p: TransformerBlockParams) -> np.ndarray:
    """Forward-only block; see transformer_block_fwd."""
    out, _ = transformer_block_fwd(Q, KV, p)
    return out


def transformer_block_batch(Q: np.ndarray, KV: np.ndarray, p: TransformerBlockParams) -> np.ndarray:
    """Forward over a leading batch axis: Q (B, q, d), KV (B, n, d)."""
    Q = np.asarray(Q, dtype=np.float64)
    KV = np.asarray(KV, dtype=np.float64)
    d = p.d_model
    if Q.shape[-1] != d or KV.shape[-1] != d:
        raise DimMismatch(f"inputs must have width {d}")
    scale = 1.0 / np.sqrt(d // p.n_heads)

    Qn, _ = layer_norm_fwd(Q, p.ln1_g, p.ln1_b)
    KVn, _ = layer_norm_fwd(KV, p.ln1_g, p.ln1_b)
    qh = _split_heads(Qn @ p.wq + p.bq, p.n_heads)       # (B, H, q, dh)
    kh = _split_heads(KVn @ p.wk + p.bk, p.n_heads)
    vh = _split_heads(KVn @ p.wv + p.bv, p.n_heads)
    A = softmax_rows((qh @ kh.swapaxes(-1, -2)) * scale)
    attn = _merge_heads(A @ vh) @ p.wo + p.bo
    T = attn + Q
    Tn, _ = layer_norm_fwd(T, p.ln2_g, p.ln2_b)
    return gelu(Tn @ p.w1 + p.b1) @ p.w2 + p.b2 + T


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

def finite_difference_errors(f, x0: np.ndarray, analytic: np.ndarray,
                             eps: float = 1e-5) -> np.ndarray:
    """Per-coordinate |analytic - central difference| / max(1, |analytic|).

    f maps a flat float64 vector to a scalar; `analytic` is the claimed
    gradient at x0. Raises NonFiniteLoss if any probe evaluates to NaN/Inf.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps:g} outside [1e-6, 1e-3]")
    x0 = np.asarray(x0, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if x0.shape != analytic.shape:
        raise DimMismatch("gradient shape does not match parameter shape")
    errors = np.empty(x0.size)
    x = x0.copy()
    for i in range(x0.size):
        orig = x[i]
        x[i] = orig + eps
        f_plus = float(f(x))
        x[i] = orig - eps
        f_minus = float(f(x))
        x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteLoss(f"objective non-finite near coordinate {i}")
        fd = (f_plus - f_minus) / (2.0 * eps)
        errors[i] = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
    return errors


def grad_check(f, x0: np.ndarray, analytic: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central differences."""
    return float(finite_difference_errors(f, x0, analytic, eps).max())

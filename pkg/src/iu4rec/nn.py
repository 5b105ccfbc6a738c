"""Dense numeric kernels: softmax, target attention, MLP, Adagrad, gradient checking.

All math is float64 numpy. Forward kernels are pure; every forward has a
matching backward so full models can be trained and verified with finite
differences. "Dense matrices" are plain 2-D float64 ndarrays.
"""

from dataclasses import dataclass, field

import numpy as np


class KernelError(ValueError):
    """Bad numeric input to a kernel (NaN, empty history, shape mismatch)."""


def softmax_rows(m):
    """Row-wise softmax with max-subtraction for stability.

    Raises KernelError naming the first offending row if any entry is NaN.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    nan_rows = np.nonzero(np.isnan(m).any(axis=-1))
    if len(nan_rows[0]):
        raise KernelError(f"softmax_rows: NaN in row {nan_rows[0][0]}")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(logits, mask):
    """Softmax over the last axis with masked slots forced to exact zero weight.

    Every row of ``mask`` must have at least one True slot.
    """
    if not mask.any(axis=-1).all():
        raise KernelError("masked_softmax: a row has no unmasked slot")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Multi-head target attention
# ---------------------------------------------------------------------------

def attention_forward(query, history, mask, wq, wk, wv, heads):
    """Batched multi-head target attention.

    query   (B, dq)      -- target representation, used as Q
    history (B, H, dk)   -- behavior sequence, used as K and V
    mask    (B, H) bool  -- True where the slot is a real entry
    wq (p, dq), wk (p, dk), wv (p, dk) with p divisible by ``heads``

    Logits are scaled by sqrt(per-head width). Returns (out (B, p), cache).
    """
    B, H, dk = history.shape
    p = wq.shape[0]
    if H < 1:
        raise KernelError("attention: empty history (callers must pad)")
    if p % heads != 0:
        raise KernelError(f"attention: {heads} heads do not divide width {p}")
    d = p // heads
    q = query @ wq.T                                   # (B, p)
    k = history @ wk.T                                 # (B, H, p)
    v = history @ wv.T
    qh = q.reshape(B, heads, d)
    kh = k.reshape(B, H, heads, d)
    vh = v.reshape(B, H, heads, d)
    logits = np.einsum("bhd,bthd->bht", qh, kh) / np.sqrt(d)
    w = masked_softmax(logits, mask[:, None, :])       # (B, heads, H)
    out = np.einsum("bht,bthd->bhd", w, vh).reshape(B, p)
    cache = (query, history, mask, wq, wk, wv, heads, qh, kh, vh, w)
    return out, cache


def attention_backward(cache, dout):
    """Backward of attention_forward.

    Returns (dquery, dhistory, dwq, dwk, dwv). Masked history slots receive
    exactly zero gradient.
    """
    query, history, mask, wq, wk, wv, heads, qh, kh, vh, w = cache
    B, H, dk = history.shape
    p = wq.shape[0]
    d = p // heads
    douth = dout.reshape(B, heads, d)
    dvh = np.einsum("bht,bhd->bthd", w, douth)
    dw = np.einsum("bhd,bthd->bht", douth, vh)
    dlogits = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
    dlogits /= np.sqrt(d)
    dqh = np.einsum("bht,bthd->bhd", dlogits, kh)
    dkh = np.einsum("bht,bhd->bthd", dlogits, qh)
    dq = dqh.reshape(B, p)
    dk_ = dkh.reshape(B, H, p)
    dv = dvh.reshape(B, H, p)
    dquery = dq @ wq
    dhistory = dk_ @ wk + dv @ wv
    dwq = dq.T @ query
    dwk = np.einsum("btp,btk->pk", dk_, history)
    dwv = np.einsum("btp,btk->pk", dv, history)
    return dquery, dhistory, dwq, dwk, dwv


def target_attention(target_emb, history_embs, params, heads):
    """Single-sample MHTA: softmax(Q K^T / sqrt(d)) V, concatenated over heads.

    ``params`` holds projection matrices under keys "wq", "wk", "wv".
    """
    history_embs = np.asarray(history_embs, dtype=np.float64)
    if history_embs.ndim != 2 or history_embs.shape[0] < 1:
        raise KernelError("target_attention: empty history (callers must pad)")
    H = history_embs.shape[0]
    out, _ = attention_forward(
        np.asarray(target_emb, dtype=np.float64)[None, :],
        history_embs[None, :, :],
        np.ones((1, H), dtype=bool),
        params["wq"], params["wk"], params["wv"], heads,
    )
    return out[0]


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

def mlp_forward(x, layers):
    """Forward through (W, b, activation) layers; activation in {"relu", "linear"}.

    x may be (d,) or (B, d); the final layer must have width 1. Returns
    (logit, cache) where logit is a scalar for a single sample or (B,) batched.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    zs, acts = [], [a]
    for w, b, act in layers:
        if a.shape[1] != w.shape[1]:
            raise KernelError(
                f"mlp_forward: input width {a.shape[1]} != weight width {w.shape[1]}")
        z = a @ w.T + b
        zs.append(z)
        a = np.maximum(z, 0.0) if act == "relu" else z
        acts.append(a)
    if a.shape[1] != 1:
        raise KernelError(f"mlp_forward: final layer width {a.shape[1]}, expected 1")
    logit = a[:, 0]
    cache = (layers, zs, acts, single)
    return (logit[0] if single else logit), cache


def mlp_backward(cache, dlogit):
    """Backward of mlp_forward. Returns (dx, [(dW, db) per layer])."""
    layers, zs, acts, single = cache
    da = np.atleast_1d(np.asarray(dlogit, dtype=np.float64))[:, None]
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        w, b, act = layers[i]
        dz = da * (zs[i] > 0) if act == "relu" else da
        grads[i] = (dz.T @ acts[i], dz.sum(axis=0))
        da = dz @ w
    return (da[0] if single else da), grads


# ---------------------------------------------------------------------------
# Adagrad with accumulator decay
# ---------------------------------------------------------------------------

@dataclass
class AdagradState:
    """Per-parameter squared-gradient accumulator with optional decay."""
    accum: np.ndarray
    decay: float = 0.9999
    epsilon: float = 1e-8


def adagrad_update(param, grad, state, lr, sparse=False):
    """In-place update: G <- decay*G + g^2; param <- param - lr*g/sqrt(G+eps).

    With sparse=True (embedding tables) only rows carrying a nonzero gradient
    are touched; untouched rows keep their accumulator unchanged.
    """
    if param.shape != grad.shape:
        raise KernelError(f"adagrad_update: shape {param.shape} vs grad {grad.shape}")
    if sparse:
        rows = np.nonzero((grad != 0).any(axis=tuple(range(1, grad.ndim))))[0]
        g = grad[rows]
        state.accum[rows] = state.decay * state.accum[rows] + g * g
        param[rows] -= lr * g / np.sqrt(state.accum[rows] + state.epsilon)
    else:
        state.accum *= state.decay
        state.accum += grad * grad
        param -= lr * grad / np.sqrt(state.accum + state.epsilon)
    return param, state


@dataclass
class EmbeddingTable:
    """Embedding lookup table with per-row Adagrad state.

    Row 0 is the padding row: frozen all-zero (its gradient is discarded
    before every update, so it never moves).
    """
    vocab_size: int
    dim: int
    weights: np.ndarray = None
    state: AdagradState = None

    @classmethod
    def create(cls, vocab_size, dim, rng, scale=0.05, decay=0.9999, epsilon=1e-8):
        w = rng.normal(0.0, scale, size=(vocab_size, dim))
        w[0] = 0.0
        return cls(vocab_size, dim, w,
                   AdagradState(np.zeros((vocab_size, dim)), decay, epsilon))

    def lookup(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)][0]
            raise KernelError(f"embedding lookup: id {bad} out of vocab {self.vocab_size}")
        return self.weights[ids]

    def apply_grad(self, grad, lr):
        grad[0] = 0.0  # padding row is frozen
        adagrad_update(self.weights, grad, self.state, lr, sparse=True)


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params, eps=1e-5):
    """Compare analytic gradients to central finite differences.

    loss_fn(params) must return (loss, grads) where grads maps every name in
    ``params`` to an array of the same shape. Returns {name: max relative
    error}, with relative error |a - n| / max(|a|, |n|, 1e-6); the floor
    absorbs finite-difference noise (~eps_machine * |loss| / eps) on elements
    whose true gradient is too small for central differences to resolve.
    """
    loss1, grads1 = loss_fn(params)
    loss2, grads2 = loss_fn(params)
    if loss1 != loss2 or any((grads1[k] != grads2[k]).any() for k in params):
        raise KernelError("grad_check: loss_fn is not deterministic")

    errors = {}
    for name, arr in params.items():
        analytic = grads1[name]
        worst = 0.0
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_fn(params)
            flat[i] = orig - eps
            lm, _ = loss_fn(params)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        errors[name] = worst
    return errors

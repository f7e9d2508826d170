"""Dense kernels the backbone and aggregation stages are built from.

Everything is float64, pure, and deterministic. Attention keeps its
softmax weights and logits around (AttentionTrace) so downstream code
can assert convexity / inspect what got attended to, and so the analytic
backward does not have to recompute them.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    EvenKernel,
    IndivisibleHeads,
    NonFiniteEvaluation,
    ShapeMismatch,
)


@dataclass(frozen=True)
class AttentionTrace:
    output: np.ndarray   # Tq x d
    weights: np.ndarray  # Tq x Tk, rows sum to 1
    logits: np.ndarray   # Tq x Tk


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def affine(x, w, b):
    """y = x @ w + b for x: T x in, w: in x out, b: out."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch("affine: %s @ %s + %s" % (x.shape, w.shape, b.shape))
    return x @ w + b


def conv1d(x, kernels, dilation=1):
    """Same-padded dilated cross-correlation along time.

    x: T x C_in, kernels: C_out x C_in x k (k odd), output: T x C_out.
    """
    x, kernels = np.asarray(x), np.asarray(kernels)
    if x.ndim != 2 or kernels.ndim != 3 or kernels.shape[1] != x.shape[1]:
        raise ShapeMismatch("conv1d: x %s kernels %s" % (x.shape, kernels.shape))
    k = kernels.shape[2]
    if k % 2 == 0:
        raise EvenKernel("kernel width must be odd, got %d" % k)
    t = x.shape[0]
    pad = dilation * (k - 1) // 2
    xpad = np.zeros((t + 2 * pad, x.shape[1]))
    xpad[pad : pad + t] = x
    out = np.zeros((t, kernels.shape[0]))
    for j in range(k):
        out += xpad[j * dilation : j * dilation + t] @ kernels[:, :, j].T
    return out


def softmax_rows(x):
    """Row-wise softmax with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _scale(d, scale_mode):
    if scale_mode == "sqrt":
        return np.sqrt(float(d))
    if scale_mode == "linear":
        return float(d)
    raise ValueError("unknown scale_mode %r" % scale_mode)


def scaled_dot_attention(q, k, v, scale_mode="sqrt") -> AttentionTrace:
    """softmax(Q K^T / s) V with s = sqrt(d) or s = d (`linear` mode)."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch("attention: Q %s K %s V %s" % (q.shape, k.shape, v.shape))
    logits = (q @ k.T) / _scale(q.shape[1], scale_mode)
    weights = softmax_rows(logits)
    return AttentionTrace(weights @ v, weights, logits)


def attention_backward(trace: AttentionTrace, q, k, v, d_out, scale_mode="sqrt"):
    """Gradients of sum(output * d_out) w.r.t. Q, K, V.

    `trace` must come from scaled_dot_attention on the same Q, K, V; the
    softmax Jacobian is applied row by row through the cached weights.
    """
    q, k, v, d_out = (np.asarray(a) for a in (q, k, v, d_out))
    if d_out.shape != trace.output.shape:
        raise ShapeMismatch("d_out %s vs output %s" % (d_out.shape, trace.output.shape))
    a = trace.weights
    s = _scale(q.shape[1], scale_mode)
    d_v = a.T @ d_out
    d_a = d_out @ v.T
    d_logits = a * (d_a - np.sum(d_a * a, axis=1, keepdims=True))
    d_q = d_logits @ k / s
    d_k = d_logits.T @ q / s
    return d_q, d_k, d_v


def multi_head_attention(q, k, v, heads, params):
    """Projected multi-head attention.

    params holds wq/bq, wk/bk, wv/bv (d x d, d) and the output projection
    wo/bo. Returns (output, head_weights); for a single query row the
    weights come back as heads x Tk.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    d = q.shape[1]
    if d % heads:
        raise IndivisibleHeads("d=%d not divisible by %d heads" % (d, heads))
    qp = affine(q, params["wq"], params["bq"])
    kp = affine(k, params["wk"], params["bk"])
    vp = affine(v, params["wv"], params["bv"])
    hd = d // heads
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        tr = scaled_dot_attention(qp[:, sl], kp[:, sl], vp[:, sl], "sqrt")
        outs.append(tr.output)
        weights.append(tr.weights)
    out = affine(np.concatenate(outs, axis=1), params["wo"], params["bo"])
    hw = np.stack(weights)
    if q.shape[0] == 1:
        hw = hw[:, 0, :]
    return out, hw


def multi_head_attention_backward(q, k, v, heads, params, d_out):
    """Gradients of sum(output * d_out) w.r.t. every projection parameter
    plus the K/V input (K and V may be the same array, e.g. a token bank).

    Returns (param_grads, d_q_in, d_k_in, d_v_in).
    """
    q, k, v, d_out = (np.asarray(a) for a in (q, k, v, d_out))
    d = q.shape[1]
    hd = d // heads
    qp = affine(q, params["wq"], params["bq"])
    kp = affine(k, params["wk"], params["bk"])
    vp = affine(v, params["wv"], params["bv"])

    concat = np.empty((q.shape[0], d))
    traces = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        tr = scaled_dot_attention(qp[:, sl], kp[:, sl], vp[:, sl], "sqrt")
        concat[:, sl] = tr.output
        traces.append(tr)

    d_concat = d_out @ params["wo"].T
    d_qp = np.zeros_like(qp)
    d_kp = np.zeros_like(kp)
    d_vp = np.zeros_like(vp)
    for h, tr in enumerate(traces):
        sl = slice(h * hd, (h + 1) * hd)
        dq, dk, dv = attention_backward(tr, qp[:, sl], kp[:, sl], vp[:, sl], d_concat[:, sl], "sqrt")
        d_qp[:, sl] = dq
        d_kp[:, sl] = dk
        d_vp[:, sl] = dv

    grads = {
        "wo": concat.T @ d_out,
        "bo": d_out.sum(axis=0),
        "wq": q.T @ d_qp,
        "bq": d_qp.sum(axis=0),
        "wk": k.T @ d_kp,
        "bk": d_kp.sum(axis=0),
        "wv": v.T @ d_vp,
        "bv": d_vp.sum(axis=0),
    }
    return grads, d_qp @ params["wq"].T, d_kp @ params["wk"].T, d_vp @ params["wv"].T


def glu_gated_conv(x, kernels, bias, dilation=1):
    """Gated linear unit over a same-padded conv.

    kernels: 2C x C x k, bias: 2C. The first C output channels are the
    content half a, the last C the gate half b; output = a * sigmoid(b).
    """
    x = np.asarray(x)
    c = x.shape[1]
    if kernels.shape[0] != 2 * c or bias.shape != (2 * c,):
        raise ShapeMismatch("glu: kernels %s bias %s for C=%d" % (kernels.shape, bias.shape, c))
    y = conv1d(x, kernels, dilation) + bias
    return y[:, :c] * sigmoid(y[:, c:])


@dataclass(frozen=True)
class GradReport:
    max_rel_error: float
    arg_index: int
    flat_index: int


def gradcheck(f, grad, xs, h=1e-5, abs_floor=1e-8) -> GradReport:
    """Central-difference check of an analytic gradient.

    f(xs) -> scalar, grad(xs) -> list of arrays matching xs. Every
    coordinate of every input is perturbed by +-h; the report carries the
    worst relative error (with `abs_floor` absolute clamp) and where it
    occurred.
    """
    xs = [np.ascontiguousarray(x, dtype=np.float64) for x in xs]
    analytic = grad(xs)
    worst, w_arg, w_flat = 0.0, -1, -1
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        ana = np.asarray(analytic[i]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(xs)
            flat[j] = orig - h
            fm = f(xs)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteEvaluation("f non-finite at arg %d index %d" % (i, j))
            num = (fp - fm) / (2.0 * h)
            rel = abs(ana[j] - num) / max(abs(num), abs(ana[j]), abs_floor)
            if rel > worst:
                worst, w_arg, w_flat = rel, i, j
    return GradReport(worst, w_arg, w_flat)

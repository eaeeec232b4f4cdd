"""Shared numerical helpers for the test suite."""
import math

import numpy as np

from mcva.tensor import Tape


def numeric_grad(f, arr, eps=1e-3):
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


def gradcheck(build, tensors, eps=1e-3, max_entries=None, rng=None):
    """Compare tape gradients of ``build()`` (a scalar Tensor) with central differences.

    ``max_entries`` limits each tensor to a random subset of coordinates.
    Returns max |analytic - numeric| over every checked entry divided by the
    largest numeric magnitude, so tensors whose true gradient is exactly zero
    (a key bias under softmax, say) are judged against the whole gradient.
    """
    with Tape() as tape:
        loss = build()
    grads = tape.backward(loss)
    all_ana, all_num = [], []
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        analytic = grads[t]
        idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[k] for k in pick]
        num = np.zeros(len(idx))
        ana = np.zeros(len(idx))
        for k, i in enumerate(idx):
            old = t.data[i]
            t.data[i] = old + eps
            hi = float(build().data)
            t.data[i] = old - eps
            lo = float(build().data)
            t.data[i] = old
            num[k] = (hi - lo) / (2 * eps)
            ana[k] = analytic[i]
        all_ana.append(ana)
        all_num.append(num)
    return rel_error(np.concatenate(all_ana), np.concatenate(all_num))


def ulp_close(a, b, ulps=4):
    """Elementwise |a - b| <= ulps * spacing(max(|a|, |b|))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    return bool(np.all(np.abs(a - b) <= ulps * np.spacing(scale) + 1e-300))


def naive_conv(x, w, b, stride):
    """Direct nested-loop cross-correlation with (k-1)/2 zero padding, [Cin,H,W] input."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = (k - 1) // 2
    ho = -(-h // stride)
    wo = -(-wd // stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            y = i * stride + di - p
                            xx = j * stride + dj - p
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += x[c, y, xx] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def naive_attention(q, k, v):
    """Row-by-row softmax(q k^T / sqrt(d)) v with explicit loops."""
    m, d = q.shape
    n = k.shape[0]
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        s = [sum(q[i, t] * k[j, t] for t in range(d)) / np.sqrt(d) for j in range(n)]
        mx = max(s)
        e = [np.exp(x - mx) for x in s]
        z = sum(e)
        for j in range(n):
            out[i] += (e[j] / z) * v[j]
    return out


def gelu_ref(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def linear_ref(x, layer):
    """Correctly rounded dot products of one input vector with a Linear layer."""
    w = layer.weight.data.astype(np.float64)
    b = layer.bias.data.astype(np.float64)
    return np.array([math.fsum([b[j]] + [x[i] * w[i, j] for i in range(len(x))]) for j in range(w.shape[1])])


def ffn_ref(x, ffn):
    return linear_ref([gelu_ref(v) for v in linear_ref(x, ffn.fc1)], ffn.fc2)


def decoder_query_ref(dec, patch, loc):
    """Query vector FFN(FFN(patch) + PE(loc)) for one source pixel."""
    from mcva.nn import sinusoidal_2d

    d = dec.query_ffn.fc2.weight.shape[1]
    pe = sinusoidal_2d([loc[0]], [loc[1]], d)[0]
    return ffn_ref(ffn_ref(np.ravel(patch), dec.patch_ffn) + pe, dec.query_ffn)


def attention_ref(q, keys, values):
    """Single-query softmax attention with correctly rounded sums."""
    d = len(q)
    s = [math.fsum(q[i] * k[i] for i in range(d)) / math.sqrt(d) for k in keys]
    mx = max(s)
    e = [math.exp(x - mx) for x in s]
    z = math.fsum(e)
    return np.array([math.fsum(e[j] / z * values[j][c] for j in range(len(values)))
                     for c in range(values.shape[1])])


def decode_ref(dec, memory, patch, loc):
    """Whole cost-memory decoding of one source pixel in float64."""
    q = decoder_query_ref(dec, patch, loc)
    keys = np.array([ffn_ref(t, dec.key_ffn) for t in memory])
    values = np.array([ffn_ref(t, dec.value_ffn) for t in memory])
    return attention_ref(q, keys, values)


def normwise_ulps(got, ref):
    """Largest error measured in ulps of the largest reference magnitude."""
    ref = np.asarray(ref, dtype=np.float64)
    return float(np.max(np.abs(np.asarray(got, dtype=np.float64) - ref)) / np.spacing(np.max(np.abs(ref))))


def attention_error_ulps(q, k, v, got):
    """Error of single-query attention in ulps of its conditioning-aware magnitude.

    The scale is (p @ |v|) * (1 + max_j sum_t |q_t k_jt| / sqrt(d)): rounding in the
    logits moves the softmax weights by up to that relative amount.
    """
    d = len(q)
    ref = attention_ref(q, k, v)
    s = k @ q / math.sqrt(d)
    p = np.exp(s - s.max())
    p /= p.sum()
    cond = 1.0 + np.max(np.abs(k) @ np.abs(q)) / math.sqrt(d)
    scale = (p @ np.abs(v)) * cond
    return float(np.max(np.abs(got - ref) / np.spacing(scale)))


def linear_error_ulps(x, layer, got):
    """Error of one Linear application in ulps of |x| @ |W| + |b|."""
    exact = linear_ref(x, layer)
    scale = np.abs(x) @ np.abs(layer.weight.data) + np.abs(layer.bias.data)
    return float(np.max(np.abs(got - exact) / np.spacing(scale)))


def gelu_error_ulps(x, got):
    exact = np.array([gelu_ref(v) for v in x])
    return float(np.max(np.abs(got - exact) / np.spacing(np.maximum(np.abs(x), 1e-300))))


def decode_stagewise(dec, query, memory):
    """Run ``decode_cost_feature`` while recording every Linear, GELU and attention call.

    Each recorded call is compared with its correctly rounded oracle on the inputs it
    actually received. Returns (output, worst stage error in ulps, number of stages).
    """
    from mcva import decoder as dmod
    from mcva import nn
    from mcva import tensor as T

    calls = []
    lin_call, gelu, attn = nn.Linear.__call__, T.gelu, T.scaled_dot_attention

    def rec_lin(self, x):
        y = lin_call(self, x)
        calls.append(("linear", self, x.data.copy(), y.data.copy()))
        return y

    def rec_gelu(x):
        y = gelu(x)
        calls.append(("gelu", None, x.data.copy(), y.data.copy()))
        return y

    def rec_attn(q, k, v, key_mask=None):
        y = attn(q, k, v, key_mask)
        calls.append(("attention", None, (q.data.copy(), k.data.copy(), v.data.copy()), y.data.copy()))
        return y

    nn.Linear.__call__, T.gelu, dmod.T.scaled_dot_attention = rec_lin, rec_gelu, rec_attn
    try:
        out = dmod.decode_cost_feature(memory, query, dec).data
    finally:
        nn.Linear.__call__, T.gelu, dmod.T.scaled_dot_attention = lin_call, gelu, attn
    worst = 0.0
    for kind, layer, x, y in calls:
        if kind == "linear":
            rows = x.reshape(-1, x.shape[-1])
            ys = y.reshape(-1, y.shape[-1])
            errs = [linear_error_ulps(r, layer, yr) for r, yr in zip(rows, ys)]
        elif kind == "gelu":
            errs = [gelu_error_ulps(x.ravel(), y.ravel())]
        else:
            q, k, v = x
            q, k, v, y = q.reshape(-1, q.shape[-1]), k.reshape(-1, k.shape[-1]), v.reshape(-1, v.shape[-1]), y.ravel()
            errs = [attention_error_ulps(q[0], k, v, y)]
        worst = max(worst, max(errs))
    return out, worst, len(calls)

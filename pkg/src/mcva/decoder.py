"""Cost-memory decoding, the reconstruction pre-text head/loss and the recurrent flow updater."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import FFN, Linear, Module, sinusoidal_2d
from .tensor import Tensor

QUERY_PATCH = 9
TARGET_PATCH = 15
STD_EPS = 1e-6


@dataclass
class DecoderQuery:
    location: tuple  # continuous (row, col) on the cost map
    patch: np.ndarray = None  # 9x9 cost patch, required for pe_plus_patch
    mode: str = "pe_plus_patch"  # or "pe_only"
    location_mode: str = "random"  # fixed | random | flow_predicted


@dataclass
class FlowField:
    values: np.ndarray  # [2, H, W] as (u, v) in feature-grid units
    iteration: int = 0

    def to_pixels(self, stride_to_image):
        return self.values * stride_to_image


@dataclass
class PretextTarget:
    raw: np.ndarray
    standardized: np.ndarray
    mean: float
    std: float


class CostDecoder(Module):
    """Q = FFN(FFN(q) + PE(p)), K = FFN(T), V = FFN(T), c = Attention(Q, K, V)."""

    def __init__(self, token_dim, rng, patch_size=QUERY_PATCH, dtype=np.float32):
        self.patch_ffn = FFN(patch_size * patch_size, token_dim, rng, dtype=dtype)
        self.query_ffn = FFN(token_dim, token_dim, rng, dtype=dtype)
        self.key_ffn = FFN(token_dim, token_dim, rng, dtype=dtype)
        self.value_ffn = FFN(token_dim, token_dim, rng, dtype=dtype)
        self._dim = token_dim

    def memory_kv(self, memory):
        """memory [N, K, D] -> (keys, values), both [N, K, D]."""
        return self.key_ffn(memory), self.value_ffn(memory)

    def query(self, patch, location):
        """patch [N, 81] or None (PE-only query); location [N, 2] (row, col)."""
        location = np.asarray(location, dtype=np.float64)
        pe = sinusoidal_2d(location[:, 0], location[:, 1], self._dim)
        dtype = self.query_ffn.fc1.weight.dtype
        q = Tensor(pe.astype(dtype))
        if patch is not None:
            q = self.patch_ffn(patch) + q
        q = self.query_ffn(q)
        return T.reshape(q, (q.shape[0], 1, self._dim))

    def __call__(self, kv, patch, location):
        keys, values = kv
        out = T.scaled_dot_attention(self.query(patch, location), keys, values)
        return T.reshape(out, (out.shape[0], self._dim))


def decode_cost_feature(memory_x, query, decoder):
    """Single source pixel: memory_x [K, D] -> aggregated cost feature [D]."""
    if query.mode == "pe_plus_patch":
        if query.patch is None:
            raise ConfigError("pe_plus_patch query needs a cost patch")
        patch = Tensor(np.asarray(query.patch, dtype=decoder.patch_ffn.fc1.weight.dtype).reshape(1, -1))
    elif query.mode == "pe_only":
        patch = None
    else:
        raise ConfigError(f"unknown query mode {query.mode!r}")
    mem = memory_x if isinstance(memory_x, Tensor) else Tensor(memory_x)
    mem = T.reshape(mem, (1,) + mem.shape)
    out = decoder(decoder.memory_kv(mem), patch, [query.location])
    return T.reshape(out, (out.shape[1],))


def sample_pretext_location(rng, hc, wc, mode="random", n=None):
    """Uniform location on [0, Hc-1] x [0, Wc-1], or the grid centre in fixed mode."""
    shape = (2,) if n is None else (n, 2)
    if mode == "fixed":
        return np.broadcast_to(np.array([(hc - 1) / 2.0, (wc - 1) / 2.0]), shape).copy()
    if mode != "random":
        raise ConfigError(f"unknown location mode {mode!r}")
    u = rng.random(shape)
    return u * np.array([hc - 1, wc - 1], dtype=np.float64)


class PretextHead(Module):
    """Two-layer MLP from the cost feature to a 15x15 patch."""

    def __init__(self, token_dim, rng, hidden=256, dtype=np.float32):
        self.fc1 = Linear(token_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, TARGET_PATCH * TARGET_PATCH, rng, dtype)

    def __call__(self, c):
        return self.fc2(T.gelu(self.fc1(c)))


def pretext_predict(c, head):
    return head(c)


def standardize_target(raw):
    raw = np.asarray(raw)
    flat = raw.reshape(raw.shape[0], -1) if raw.ndim == 3 else raw.reshape(1, -1)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    return ((flat - mu) / (sd + STD_EPS)).astype(raw.dtype), mu[:, 0], sd[:, 0]


def make_pretext_target(raw):
    z, mu, sd = standardize_target(raw)
    return PretextTarget(np.asarray(raw), z.reshape(np.shape(raw)), float(mu[0]), float(sd[0]))


def _standardize_tensor(x):
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    sd = T.sqrt(T.mean(T.square(xc), axis=-1, keepdims=True))
    return xc * T.reciprocal(sd + STD_EPS)


def pretext_loss(pred, target_raw, normalize_side="target"):
    """Mean over source pixels of the per-patch mean squared error.

    pred: Tensor [N, 225]; target_raw: [N, 15, 15] raw cost patches.
    ``normalize_side='target'`` compares pred with the standardized target;
    ``'prediction'`` compares the raw target with the standardized prediction.
    """
    n = pred.shape[0]
    if n == 0:
        raise ConfigError("pretext loss needs at least one source pixel")
    raw = np.asarray(target_raw).reshape(n, -1).astype(pred.dtype)
    if normalize_side == "target":
        z, _, _ = standardize_target(raw.reshape(n, 1, -1))
        diff = pred - Tensor(z)
    elif normalize_side == "prediction":
        diff = Tensor(raw) - _standardize_tensor(pred)
    else:
        raise ConfigError(f"unknown normalize_side {normalize_side!r}")
    return T.mean(T.square(diff))


class FlowUpdater(Module):
    """Gated recurrent cell over [cost feature, context, flow encoding] plus a
    two-layer head (zero-initialised output) producing the flow increment."""

    def __init__(self, token_dim, context_dim, rng, hidden_dim=64, flow_dim=32, dtype=np.float32):
        in_dim = token_dim + context_dim + flow_dim
        self.flow_enc = Linear(2, flow_dim, rng, dtype)
        self.init_hidden = Linear(context_dim, hidden_dim, rng, dtype)
        self.gate_z = Linear(hidden_dim + in_dim, hidden_dim, rng, dtype)
        self.gate_r = Linear(hidden_dim + in_dim, hidden_dim, rng, dtype)
        self.cand = Linear(hidden_dim + in_dim, hidden_dim, rng, dtype)
        self.head1 = Linear(hidden_dim, 128, rng, dtype)
        self.head2 = Linear(128, 2, rng, dtype, zero=True)

    def initial_hidden(self, ctx):
        return T.tanh(self.init_hidden(ctx))

    def __call__(self, hidden, c, ctx, flow):
        """One update. ctx [N, Dc] Tensor, flow [N, 2] array (treated as constant)."""
        f = Tensor(np.asarray(flow, dtype=c.dtype))
        x = T.concat([c, T.relu(ctx), T.relu(self.flow_enc(f))], axis=-1)
        hx = T.concat([hidden, x], axis=-1)
        z = T.sigmoid(self.gate_z(hx))
        r = T.sigmoid(self.gate_r(hx))
        cand = T.tanh(self.cand(T.concat([r * hidden, x], axis=-1)))
        hidden = hidden + z * (cand - hidden)
        delta = self.head2(T.relu(self.head1(hidden)))
        return hidden, delta


def flow_update_step(hidden, c, ctx, flow, updater):
    hidden, delta = updater(hidden, c, ctx, flow)
    return hidden, delta


def grid_coords(h, w):
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def run_recurrent_decoder(memory, cost_volume, ctx, n_iters, decoder, updater, trace=None):
    """Iteratively refine flow from zero; returns the flow after every iteration.

    memory [B, H, W, K, D] Tensor; cost_volume [B, H, W, Hc, Wc] array;
    ctx [B, Dc, H, W] Tensor. Flows are Tensors [B, 2, H, W] as (u, v) in grid units.
    ``trace``, when a list, receives the crop centres used at each iteration.
    """
    if n_iters < 1:
        raise ConfigError("n_iters must be at least 1")
    b, h, w, k, d = memory.shape
    hc, wc = cost_volume.shape[-2:]
    n = b * h * w
    kv = decoder.memory_kv(T.reshape(memory, (n, k, d)))
    dc = ctx.shape[1]
    ctx_flat = T.reshape(T.transpose(ctx, (0, 2, 3, 1)), (n, dc))
    hidden = updater.initial_hidden(ctx_flat)
    if isinstance(cost_volume, Tensor):
        maps = T.reshape(cost_volume, (n, hc, wc))
    else:
        maps = Tensor(np.asarray(cost_volume).reshape(n, hc, wc))
    base = np.tile(grid_coords(h, w), (b, 1))
    flow = np.zeros((n, 2), dtype=np.float64)
    flows = []
    for _ in range(n_iters):
        centers = base + flow[:, ::-1]
        if trace is not None:
            trace.append(centers.copy())
        patch = T.reshape(T.crop_patch(maps, centers, QUERY_PATCH), (n, QUERY_PATCH * QUERY_PATCH))
        c = decoder(kv, patch, centers)
        hidden, delta = updater(hidden, c, ctx_flat, flow)
        new_flow = delta + Tensor(flow.astype(delta.dtype))
        flows.append(T.transpose(T.reshape(new_flow, (b, h, w, 2)), (0, 3, 1, 2)))
        flow = new_flow.data.astype(np.float64)
    return flows

"""Cost-volume encoder: masked tokenization, latent projection and AGT aggregation."""
import numpy as np

from . import tensor as T
from .errors import AllTokensMasked, ShapeError
from .nn import FFN, Conv, LayerNorm, Linear, Module, param, sinusoidal_2d
from .tensor import Tensor


class SelfAttentionBlock(Module):
    """Pre-norm single-head self-attention followed by a feed-forward sublayer."""

    def __init__(self, dim, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FFN(dim, dim, rng, hidden=2 * dim, dtype=dtype)

    def __call__(self, x):
        h = self.norm1(x)
        x = x + self.out(T.scaled_dot_attention(self.q(h), self.k(h), self.v(h)))
        return x + self.ffn(self.norm2(x))


class AGTPair(Module):
    """Intra-map attention over the K tokens of each source pixel, then
    inter-map attention over source pixels that share a latent index, grouped
    along rows (``axis='row'``) or columns."""

    def __init__(self, dim, rng, axis, dtype=np.float32):
        self.intra = SelfAttentionBlock(dim, rng, dtype)
        self.inter = SelfAttentionBlock(dim, rng, dtype)
        self._axis = axis

    def __call__(self, x):
        b, h, w, k, d = x.shape
        x = T.reshape(self.intra(T.reshape(x, (b * h * w, k, d))), (b, h, w, k, d))
        if self._axis == "row":
            y = T.reshape(T.transpose(x, (0, 1, 3, 2, 4)), (b * h * k, w, d))
            y = T.reshape(self.inter(y), (b, h, k, w, d))
            return T.transpose(y, (0, 1, 3, 2, 4))
        y = T.reshape(T.transpose(x, (0, 2, 3, 1, 4)), (b * w * k, h, d))
        y = T.reshape(self.inter(y), (b, w, k, h, d))
        return T.transpose(y, (0, 3, 1, 2, 4))


class CostEncoder(Module):
    def __init__(self, patch_dim=64, token_dim=64, latent_tokens=8, agt_pairs=2, seed=0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.patch1 = Conv(1, patch_dim, rng, stride=2, dtype=dtype)
        self.patch2 = Conv(patch_dim, patch_dim, rng, stride=2, dtype=dtype)
        self.patch3 = Conv(patch_dim, patch_dim, rng, stride=2, dtype=dtype)
        self.latent = param(rng.normal(0.0, 1.0, (latent_tokens, token_dim)), dtype)
        self.key = Linear(patch_dim, token_dim, rng, dtype)
        self.value = Linear(patch_dim, token_dim, rng, dtype)
        self.proj = Linear(token_dim, token_dim, rng, dtype)
        self.latent_norm = LayerNorm(token_dim, dtype)
        self.latent_ffn = FFN(token_dim, token_dim, rng, hidden=2 * token_dim, dtype=dtype)
        self.agt = [AGTPair(token_dim, rng, "row" if i % 2 == 0 else "col", dtype)
                    for i in range(agt_pairs)]

    @property
    def patch_dim(self):
        return self.patch1.weight.shape[0]

    @property
    def token_dim(self):
        return self.latent.shape[1]

    @property
    def latent_tokens(self):
        return self.latent.shape[0]

    def masked_patchify(self, cost_maps, masks=None):
        """F^{i+1} = conv_s2(ReLU(F^i * M^i)) for i = 0, 1, 2.

        cost_maps: [N, Hc, Wc]; masks: None or [M^0, M^1, M^2] each [N, Hc/2^i, Wc/2^i].
        Returns F^3 as [N, D_f, Hc/8, Wc/8].
        """
        x = cost_maps if isinstance(cost_maps, Tensor) else Tensor(cost_maps)
        n, hc, wc = x.shape
        x = T.reshape(x, (n, 1, hc, wc))
        if masks is not None and (hc % 8 or wc % 8):
            raise ShapeError(f"masked tokenization needs cost maps divisible by 8, got {hc}x{wc}")
        for i, conv in enumerate((self.patch1, self.patch2, self.patch3)):
            if masks is not None:
                m = np.asarray(masks[i], dtype=bool)
                if m.shape != (n,) + x.shape[2:]:
                    raise ShapeError(f"mask M^{i} has shape {m.shape}, expected {(n,) + x.shape[2:]}")
                x = T.mask_fill(x, m[:, None])
            x = conv(T.relu(x))
        return x

    def project_latent(self, f3, base_mask=None):
        """Cross-attend K learned queries over the visible F^3 tokens.

        base_mask: None or bool [N, h8, w8] (True = visible). Returns [N, K, D_t].
        """
        n, d, h, w = f3.shape
        tokens = T.transpose(T.reshape(f3, (n, d, h * w)), (0, 2, 1))
        rows, cols = np.divmod(np.arange(h * w), w)
        pe = sinusoidal_2d(rows * 8.0, cols * 8.0, d).astype(f3.dtype)
        tokens = tokens + Tensor(pe)
        key_mask = None
        if base_mask is not None:
            vis = np.asarray(base_mask, dtype=bool).reshape(n, h * w)
            if not vis.any(axis=1).all():
                raise AllTokensMasked("every F^3 token of at least one cost map is masked")
            key_mask = vis[:, None, :]
        attn = T.scaled_dot_attention(self.latent, self.key(tokens), self.value(tokens), key_mask)
        x = self.latent + self.proj(attn)
        return x + self.latent_ffn(self.latent_norm(x))

    def agt_encode(self, memory):
        for layer in self.agt:
            memory = layer(memory)
        return memory

    def __call__(self, cost_volume, pyramids=None):
        """cost_volume: [B, H, W, Hc, Wc]; pyramids: None or one MaskPyramidSet per sample.

        Returns cost memory [B, H, W, K, D_t].
        """
        cv = cost_volume.data if isinstance(cost_volume, Tensor) else np.asarray(cost_volume)
        b, h, w, hc, wc = cv.shape
        n = b * h * w
        maps = T.reshape(cost_volume, (n, hc, wc)) if isinstance(cost_volume, Tensor) \
            else cv.reshape(n, hc, wc)
        masks = base = None
        if pyramids is not None:
            levels = []
            for i in range(4):
                per_sample = [p.level(i) for p in pyramids]
                levels.append(np.concatenate([m.reshape((h * w,) + m.shape[2:]) for m in per_sample]))
            masks, base = levels[:3], levels[3]
        f3 = self.masked_patchify(maps, masks)
        latent = self.project_latent(f3, base)
        memory = T.reshape(latent, (b, h, w, self.latent_tokens, self.token_dim))
        return self.agt_encode(memory)

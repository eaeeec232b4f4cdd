"""The full network: frozen encoders, cost encoder, cost decoder, pretext head and flow updater."""
import numpy as np

from .cost_encoder import CostEncoder
from .decoder import CostDecoder, FlowUpdater, PretextHead
from .encoders import ConvEncoder
from .errors import ShapeError
from .nn import Module

# groups copied from a pretrained checkpoint into a finetuning run
TRANSFER_PREFIXES = ("image_encoder.", "cost_encoder.", "decoder.")


class FlowModel(Module):
    def __init__(self, cfg, dtype=np.float32):
        seed = cfg.model_seed
        self.image_encoder = ConvEncoder(cfg.feature_dim, [seed, 1], hidden=cfg.encoder_hidden,
                                         frozen=cfg.freeze_image_encoder, normalize=cfg.feature_norm,
                                         dtype=dtype)
        self.context_encoder = ConvEncoder(cfg.context_dim, [seed, 2], hidden=cfg.encoder_hidden,
                                           frozen=cfg.context_frozen(), dtype=dtype)
        self.cost_encoder = CostEncoder(cfg.patch_dim, cfg.token_dim, cfg.latent_tokens,
                                        cfg.agt_pairs, seed=[seed, 3], dtype=dtype)
        self.decoder = CostDecoder(cfg.token_dim, np.random.default_rng([seed, 4]), dtype=dtype)
        self.head = PretextHead(cfg.token_dim, np.random.default_rng([seed, 5]),
                                hidden=cfg.head_hidden, dtype=dtype)
        self.updater = FlowUpdater(cfg.token_dim, cfg.context_dim, np.random.default_rng([seed, 6]),
                                   hidden_dim=cfg.hidden_dim, dtype=dtype)

    def trainable_parameters(self, phase):
        """Parameters optimised in ``phase`` (frozen encoders excluded)."""
        groups = ["cost_encoder.", "decoder."]
        groups += ["head."] if phase == "pretrain" else ["updater."]
        if phase == "finetune":
            if not self.image_encoder.frozen:
                groups.append("image_encoder.")
            if not self.context_encoder.frozen:
                groups.append("context_encoder.")
        return {k: p for k, p in self.named_parameters().items() if k.startswith(tuple(groups))}


def parameter_arrays(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def load_parameters(model, arrays, prefixes=None, strict=True):
    """Copy named arrays into ``model``; shapes must agree exactly."""
    params = model.named_parameters()
    wanted = [k for k in params if prefixes is None or k.startswith(tuple(prefixes))]
    for name in wanted:
        if name not in arrays:
            if strict:
                raise ShapeError(f"checkpoint has no tensor {name!r}")
            continue
        src = np.asarray(arrays[name])
        dst = params[name]
        if src.shape != dst.shape:
            raise ShapeError(f"tensor {name!r}: checkpoint shape {src.shape} != model shape {dst.shape}")
        dst.data = src.astype(dst.data.dtype, copy=True)
    if strict and prefixes is None:
        extra = [k for k in arrays if not k.startswith("optim.") and k not in params]
        if extra:
            raise ShapeError(f"checkpoint tensor {extra[0]!r} has no place in the model")
    return model

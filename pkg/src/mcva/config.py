"""Flat ``key = value`` training configuration."""
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError

STRATEGIES = ("block", "random", "none")
LOCATION_MODES = ("random", "fixed")
QUERY_MODES = ("pe_plus_patch", "pe_only")
NORMALIZE_SIDES = ("target", "prediction")
F1_RULES = ("or", "and")
# (steps, lr_max) used when a config leaves them at "auto"
PHASE_DEFAULTS = {"pretrain": (2000, 5e-4), "finetune": (3000, 1.25e-4)}


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto(parser):
    def parse(text):
        return None if text.lower() == "auto" else parser(text)
    return parse


_parse_optional_bool = _auto(_parse_bool)


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    data_train: str = ""
    data_val: str = ""
    steps: int = None
    batch_size: int = 4
    lr_max: float = None
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0
    seed: int = 0
    log: str = ""
    eval_every: int = 0
    eval_count: int = 0
    mask_strategy: str = "block"
    mask_ratio: float = 0.5
    mask_side_min: int = 0
    mask_side_max: int = 0
    location_mode: str = "random"
    query_mode: str = "pe_plus_patch"
    normalize_side: str = "target"
    freeze_image_encoder: bool = True
    freeze_context_encoder: bool = None
    n_iters: int = 6
    gamma: float = 0.8
    feature_dim: int = 32
    context_dim: int = 32
    encoder_hidden: int = 32
    feature_norm: bool = True
    patch_dim: int = 64
    token_dim: int = 64
    latent_tokens: int = 8
    agt_pairs: int = 2
    hidden_dim: int = 64
    head_hidden: int = 256
    model_seed: int = 0
    f1_rule: str = "or"

    def context_frozen(self):
        if self.freeze_context_encoder is None:
            return self.phase == "pretrain"
        return self.freeze_context_encoder

    def side_range(self):
        if self.mask_side_min <= 0 and self.mask_side_max <= 0:
            return None
        return (self.mask_side_min, self.mask_side_max)

    def validate(self):
        """Check every field; returns a copy with phase-dependent "auto" values filled in."""

        def check(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        check(self.phase in ("pretrain", "finetune"), "phase", "must be pretrain or finetune")
        steps, lr_max = PHASE_DEFAULTS[self.phase]
        cfg = self.replace(steps=steps if self.steps is None else self.steps,
                           lr_max=lr_max if self.lr_max is None else self.lr_max)
        return cfg._check(check)

    def _check(self, check):
        check(self.steps >= 0, "train.steps", "must be >= 0")
        check(self.batch_size >= 1, "train.batch_size", "must be >= 1")
        check(self.lr_max >= 0, "train.lr_max", "must be >= 0")
        check(self.weight_decay >= 0, "train.weight_decay", "must be >= 0")
        check(self.grad_clip >= 0, "train.grad_clip", "must be >= 0")
        check(0.0 <= self.mask_ratio <= 1.0, "mask.ratio", f"{self.mask_ratio} outside [0, 1]")
        check(self.mask_strategy in STRATEGIES, "mask.strategy", f"one of {STRATEGIES}")
        if self.side_range() is not None:
            check(1 <= self.mask_side_min <= self.mask_side_max, "mask.side_min",
                  "need 1 <= mask.side_min <= mask.side_max")
        check(self.location_mode in LOCATION_MODES, "pretext.location_mode", f"one of {LOCATION_MODES}")
        check(self.query_mode in QUERY_MODES, "pretext.query_mode", f"one of {QUERY_MODES}")
        check(self.normalize_side in NORMALIZE_SIDES, "pretext.normalize_side",
              f"one of {NORMALIZE_SIDES}")
        check(self.n_iters >= 1, "decoder.n_iters", "must be >= 1")
        check(0 < self.gamma <= 1, "decoder.gamma", "must lie in (0, 1]")
        check(self.f1_rule in F1_RULES, "eval.f1_rule", f"one of {F1_RULES}")
        for key in ("token_dim", "patch_dim"):
            check(getattr(self, key) % 4 == 0, f"model.{key}", "must be a multiple of 4")
        if self.phase == "pretrain":
            check(self.mask_ratio < 1.0 or self.mask_strategy == "none", "mask.ratio",
                  "pretraining cannot mask every cell")
            check(self.freeze_image_encoder, "freeze.image_encoder",
                  "must be true for pretraining (the reconstruction targets would drift)")
        return self

    def to_text(self):
        lines = [f"{key} = {_fmt(getattr(self, attr))}" for key, (attr, _) in KEYS.items()]
        return "\n".join(lines) + "\n"

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


# config key -> (dataclass attribute, parser)
KEYS = {
    "phase": ("phase", str),
    "data.train": ("data_train", str),
    "data.val": ("data_val", str),
    "train.steps": ("steps", _auto(int)),
    "train.batch_size": ("batch_size", int),
    "train.lr_max": ("lr_max", _auto(float)),
    "train.weight_decay": ("weight_decay", float),
    "train.beta1": ("beta1", float),
    "train.beta2": ("beta2", float),
    "train.eps": ("eps", float),
    "train.grad_clip": ("grad_clip", float),
    "train.seed": ("seed", int),
    "train.log": ("log", str),
    "train.eval_every": ("eval_every", int),
    "train.eval_count": ("eval_count", int),
    "mask.strategy": ("mask_strategy", str),
    "mask.ratio": ("mask_ratio", float),
    "mask.side_min": ("mask_side_min", int),
    "mask.side_max": ("mask_side_max", int),
    "pretext.location_mode": ("location_mode", str),
    "pretext.query_mode": ("query_mode", str),
    "pretext.normalize_side": ("normalize_side", str),
    "freeze.image_encoder": ("freeze_image_encoder", _parse_bool),
    "freeze.context_encoder": ("freeze_context_encoder", _parse_optional_bool),
    "decoder.n_iters": ("n_iters", int),
    "decoder.gamma": ("gamma", float),
    "model.feature_dim": ("feature_dim", int),
    "model.context_dim": ("context_dim", int),
    "model.encoder_hidden": ("encoder_hidden", int),
    "model.feature_norm": ("feature_norm", _parse_bool),
    "model.patch_dim": ("patch_dim", int),
    "model.token_dim": ("token_dim", int),
    "model.latent_tokens": ("latent_tokens", int),
    "model.agt_pairs": ("agt_pairs", int),
    "model.hidden_dim": ("hidden_dim", int),
    "model.head_hidden": ("head_hidden", int),
    "model.seed": ("model_seed", int),
    "eval.f1_rule": ("f1_rule", str),
}


def parse_config(text, source="<config>", validate=True):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        attr, parser = KEYS[key]
        try:
            values[attr] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: cannot parse {key} = {value!r} ({exc})") from None
    cfg = TrainConfig(**values)
    if validate:
        try:
            cfg = cfg.validate()
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path, **overrides):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    cfg = parse_config(text, source=path, validate=False).replace(**overrides)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def default_fields():
    return {f.name: f.default for f in dataclasses.fields(TrainConfig)}


__all__ = ["TrainConfig", "KEYS", "parse_config", "load_config", "default_fields", "field"]

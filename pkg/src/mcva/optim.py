"""AdamW with decoupled weight decay and the one-cycle learning-rate schedule."""
import numpy as np

from .errors import ConfigError, NumericalError


def onecycle_lr(step, total_steps, lr_max, warmup_frac=0.05):
    """Linear ramp lr_max/25 -> lr_max over the first 5% of steps, then linear
    decay to lr_max/1e4 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("onecycle_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"onecycle_lr: step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    start, final = lr_max / 25.0, lr_max / 1e4
    if step <= warm:
        return start + (lr_max - start) * step / warm
    return lr_max + (final - lr_max) * (step - warm) / (total_steps - warm)


class AdamW:
    """AdamW over a name -> Tensor mapping.

    Parameters are updated in place (``tensor.data`` is replaced with a new
    array). Only tensors passed at construction are touched.
    """

    def __init__(self, params, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads, lr):
        """Apply one update. ``grads`` maps parameter name -> array."""
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            dtype = p.data.dtype
            m = self.m[name] = (b1 * self.m[name] + (1 - b1) * g).astype(dtype)
            v = self.v[name] = (b2 * self.v[name] + (1 - b2) * g * g).astype(dtype)
            w = p.data * (1.0 - lr * self.weight_decay)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (w - lr * update).astype(dtype)

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"optim.m/{name}"] = self.m[name]
            out[f"optim.v/{name}"] = self.v[name]
        out["optim.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays):
        for name in self.params:
            self.m[name] = np.array(arrays[f"optim.m/{name}"], dtype=self.params[name].data.dtype)
            self.v[name] = np.array(arrays[f"optim.v/{name}"], dtype=self.params[name].data.dtype)
        self.step_count = int(arrays["optim.step"][0])


def clip_grad_norm(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, total

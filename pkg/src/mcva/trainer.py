"""Pretraining, finetuning, evaluation and the per-step loss log."""
import math
import os

import numpy as np

from . import kernels
from . import tensor as T
from .checkpoint import Checkpoint
from .config import TrainConfig, parse_config
from .costvol import correlate
from .decoder import QUERY_PATCH, TARGET_PATCH, pretext_loss, run_recurrent_decoder, sample_pretext_location
from .errors import ConfigError, DatasetError, DivergedError, MCVAError, NumericalError, ShapeError
from .masking import generate_block_sharing_masks, generate_random_masks, masked_count, partition_blocks
from .metrics import MetricAccumulator
from .model import TRANSFER_PREFIXES, FlowModel, load_parameters, parameter_arrays
from .optim import AdamW, clip_grad_norm, onecycle_lr
from .synthdata import Dataset
from .tensor import Tape, Tensor

STRIDE = 4


def _rng(cfg, step, stream):
    return np.random.default_rng([cfg.seed, step, stream])


class FeatureCache:
    """Cost volumes and context features of frozen encoders, per dataset item."""

    def __init__(self, model, dataset):
        self.model = model
        self.dataset = dataset
        self._cv = {}
        self._ctx = {}

    def frames(self, idx):
        f1 = np.stack([self.dataset[i].frame1 for i in idx])
        f2 = np.stack([self.dataset[i].frame2 for i in idx])
        return f1, f2

    def cost_volumes(self, idx):
        missing = [i for i in dict.fromkeys(idx) if i not in self._cv]
        if missing:
            f1, f2 = self.frames(missing)
            cv = cost_volume_batch(self.model, f1, f2).data
            for k, i in enumerate(missing):
                self._cv[i] = cv[k]
        return np.stack([self._cv[i] for i in idx])

    def contexts(self, idx):
        missing = [i for i in dict.fromkeys(idx) if i not in self._ctx]
        if missing:
            f1, _ = self.frames(missing)
            ctx = self.model.context_encoder(f1).data
            for k, i in enumerate(missing):
                self._ctx[i] = ctx[k]
        return np.stack([self._ctx[i] for i in idx])


def cost_volume_batch(model, frames1, frames2):
    """[B, 3, H_I, W_I] pairs -> cost volumes [B, H, W, H, W]."""
    return correlate(model.image_encoder(frames1), model.image_encoder(frames2))


def sample_masks(cfg, shape, rng):
    """One MaskPyramidSet for a [H, W, Hc, Wc] cost volume, or None."""
    h, w, hc, wc = shape
    if cfg.mask_strategy == "none":
        return None
    if cfg.mask_strategy == "random":
        return generate_random_masks(h, w, hc, wc, cfg.mask_ratio, rng)
    part = partition_blocks(h, w, cfg.side_range(), rng)
    return generate_block_sharing_masks(part, hc, wc, cfg.mask_ratio, rng)


def pretext_step_loss(model, cv, cfg, rngs):
    """Masked reconstruction loss averaged over every source pixel of the batch.

    cv: [B, H, W, Hc, Wc] array; rngs: one Generator per sample.
    """
    b, h, w, hc, wc = cv.shape
    pyramids = None
    if cfg.mask_strategy != "none":
        pyramids = [sample_masks(cfg, cv.shape[1:], r) for r in rngs]
    memory = model.cost_encoder(cv, pyramids)
    n = b * h * w
    k, d = memory.shape[-2:]
    locs = np.concatenate([sample_pretext_location(r, hc, wc, cfg.location_mode, n=h * w) for r in rngs])
    maps = cv.reshape(n, hc, wc)
    target = kernels.crop_forward(maps, locs, TARGET_PATCH)
    patch = None
    if cfg.query_mode == "pe_plus_patch":
        patch = Tensor(kernels.crop_forward(maps, locs, QUERY_PATCH).reshape(n, -1))
    kv = model.decoder.memory_kv(T.reshape(memory, (n, k, d)))
    pred = model.head(model.decoder(kv, patch, locs))
    return pretext_loss(pred, target, cfg.normalize_side)


def grid_flow_target(gt):
    """Pixel-resolution ground truth [B, 2, H_I, W_I] -> grid units at the cell centres."""
    return grid_ground_truth(gt) / STRIDE


def sequence_loss(flows, gt_grid, gamma):
    """sum_i gamma^(N-1-i) * mean |flow_i - gt| over every iteration's prediction."""
    target = Tensor(gt_grid.astype(flows[0].dtype))
    n = len(flows)
    total = None
    for i, f in enumerate(flows):
        term = T.mean(T.abs_(f - target)) * float(gamma ** (n - 1 - i))
        total = term if total is None else total + term
    return total


def predict_grid_flow(model, cv, ctx, n_iters):
    memory = model.cost_encoder(cv, None)
    ctx = ctx if isinstance(ctx, Tensor) else Tensor(ctx)
    return run_recurrent_decoder(memory, cv, ctx, n_iters, model.decoder, model.updater)


def flow_step_loss(model, cache, idx, cfg):
    if model.image_encoder.frozen:
        cv = cache.cost_volumes(idx)
    else:
        cv = cost_volume_batch(model, *cache.frames(idx))
    if model.context_encoder.frozen:
        ctx = Tensor(cache.contexts(idx))
    else:
        ctx = model.context_encoder(cache.frames(idx)[0])
    flows = predict_grid_flow(model, cv, ctx, cfg.n_iters)
    gt = np.stack([cache.dataset[i].flow_gt for i in idx])
    return sequence_loss(flows, grid_flow_target(gt), cfg.gamma)


def predict_flows(model, frames1, frames2, n_iters):
    """Final-iteration flow at feature-grid resolution, in image pixels: [B, 2, H, W]."""
    cv = cost_volume_batch(model, frames1, frames2).data
    ctx = model.context_encoder(frames1)
    return predict_grid_flow(model, cv, ctx, n_iters)[-1].data * STRIDE


def grid_ground_truth(gt):
    """Image-pixel ground truth sampled at the feature-cell centres, still in pixels."""
    return np.asarray(gt)[..., ::STRIDE, ::STRIDE]


def evaluate_model(model, dataset, n_iters, rule="or", count=0, batch_size=4):
    dataset.require_labels()
    n = len(dataset) if count <= 0 else min(count, len(dataset))
    acc = MetricAccumulator(rule)
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        f1 = np.stack([dataset[i].frame1 for i in idx])
        f2 = np.stack([dataset[i].frame2 for i in idx])
        for i, pred in zip(idx, predict_flows(model, f1, f2, n_iters)):
            gt = dataset[i].flow_gt
            if gt is None:
                raise DatasetError(f"{dataset.pair_dir(i)}: missing flow.flo")
            acc.add(pred, grid_ground_truth(gt))
    return acc.result()


# ------------------------------------------------------------------ runs


class LossLog:
    """Append-only ``step=<n> phase=<p> loss=<f> lr=<f>`` records."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "a") if path else None

    def write(self, line):
        if self._f:
            self._f.write(line + "\n")
            self._f.flush()

    def close(self):
        if self._f:
            self._f.close()


def _fmt(x):
    return format(float(x), ".9g")


def _checkpoint(model, opt, cfg, steps_done, history):
    tensors = parameter_arrays(model)
    tensors.update(opt.state_arrays())
    echo = cfg.to_text() + f"# rng: default_rng([train.seed, step, stream]), next step = {steps_done}\n"
    return Checkpoint(tensors, echo, history)


def _open_dataset(path, what):
    if not path:
        raise DatasetError(f"{what} is not set")
    if not os.path.isdir(path):
        raise DatasetError(f"{what}: {path} is not a directory")
    return Dataset(path)


def _train(cfg, model, step_loss, log):
    trainable = model.trainable_parameters(cfg.phase)
    opt = AdamW(trainable, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    frozen = {name: enc.checksum() for name, enc in
              (("image_encoder", model.image_encoder), ("context_encoder", model.context_encoder))
              if enc.frozen}
    losses = []
    for step in range(cfg.steps):
        lr = onecycle_lr(step, cfg.steps, cfg.lr_max)
        try:
            with Tape() as tape:
                loss = step_loss(step)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError("loss is not finite")
            grads = tape.backward(loss)
            g = {k: grads[p] for k, p in trainable.items()}
            if cfg.grad_clip > 0:
                g, _ = clip_grad_norm(g, cfg.grad_clip)
            opt.step(g, lr)
        except NumericalError as exc:
            raise DivergedError(f"{cfg.phase} diverged at step {step + 1}: {exc}") from None
        losses.append(value)
        log.write(f"step={step + 1} phase={cfg.phase} loss={_fmt(value)} lr={_fmt(lr)}")
        yield step + 1, opt, losses
    for name, digest in frozen.items():
        if getattr(model, name).checksum() != digest:
            raise MCVAError(f"frozen {name} parameters changed during {cfg.phase}")


def run_pretraining(cfg, dataset=None):
    """Masked cost-volume reconstruction; returns the final :class:`Checkpoint`."""
    cfg = cfg.replace(phase="pretrain").validate()
    dataset = dataset or _open_dataset(cfg.data_train, "data.train")
    model = FlowModel(cfg)
    cache = FeatureCache(model, dataset)
    _check_grid(model, dataset, cfg)

    def step_loss(step):
        idx = [int(i) for i in _rng(cfg, step, 0).integers(0, len(dataset), cfg.batch_size)]
        rngs = [_rng(cfg, step, 1 + k) for k in range(len(idx))]
        return pretext_step_loss(model, cache.cost_volumes(idx), cfg, rngs)

    log = LossLog(cfg.log)
    opt, losses = AdamW({}), []
    try:
        for _, opt, losses in _train(cfg, model, step_loss, log):
            pass
    finally:
        log.close()
    if cfg.steps == 0:
        opt = AdamW(model.trainable_parameters("pretrain"))
    return _checkpoint(model, opt, cfg, cfg.steps, {"loss": losses})


def run_finetuning(cfg, init=None, dataset=None, val_dataset=None):
    """Supervised flow training without masks; ``init`` seeds the cost encoder and decoder."""
    cfg = cfg.replace(phase="finetune").validate()
    dataset = dataset or _open_dataset(cfg.data_train, "data.train")
    dataset.require_labels()
    if val_dataset is None and cfg.data_val and cfg.eval_every > 0:
        val_dataset = _open_dataset(cfg.data_val, "data.val")
    if val_dataset is not None:
        val_dataset.require_labels()
    model = FlowModel(cfg)
    if init is not None:
        load_parameters(model, init.params, prefixes=TRANSFER_PREFIXES)
    cache = FeatureCache(model, dataset)
    _check_grid(model, dataset, cfg)

    def step_loss(step):
        idx = [int(i) for i in _rng(cfg, step, 0).integers(0, len(dataset), cfg.batch_size)]
        return flow_step_loss(model, cache, idx, cfg)

    log = LossLog(cfg.log)
    history = {"loss": [], "val": []}
    opt = AdamW(model.trainable_parameters("finetune"))
    try:
        for step, opt, losses in _train(cfg, model, step_loss, log):
            history["loss"] = losses
            if val_dataset is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
                m = evaluate_model(model, val_dataset, cfg.n_iters, cfg.f1_rule, cfg.eval_count,
                                   cfg.batch_size)
                history["val"].append((step, m["aepe"], m["f1_all"]))
                log.write(f"step={step} phase=val aepe={_fmt(m['aepe'])} f1_all={_fmt(m['f1_all'])}")
    finally:
        log.close()
    return _checkpoint(model, opt, cfg, cfg.steps, history)


def _check_grid(model, dataset, cfg):
    h, w = dataset.height, dataset.width
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"{dataset.root}: image size {h}x{w} is not a multiple of {STRIDE}")
    if cfg.phase == "pretrain" and cfg.mask_strategy != "none" and ((h // STRIDE) % 8 or (w // STRIDE) % 8):
        raise ShapeError(f"{dataset.root}: masking needs a feature grid divisible by 8, "
                         f"got {h // STRIDE}x{w // STRIDE}")
    if cfg.phase == "pretrain" and cfg.mask_strategy != "none":
        cells = (h // STRIDE // 8) * (w // STRIDE // 8)
        if masked_count(cfg.mask_ratio, cells) >= cells:
            raise ConfigError(f"mask.ratio = {cfg.mask_ratio} masks all {cells} base-mask cell(s) of a "
                              f"{h}x{w} image; use larger images or a smaller ratio")


def model_from_checkpoint(ckpt):
    cfg = parse_config(ckpt.config_text, source="checkpoint config echo", validate=False)
    model = FlowModel(cfg)
    load_parameters(model, ckpt.params)
    return model, cfg


def evaluate(ckpt, data_path, rule=None, count=0):
    """AEPE / F1-all of a checkpoint's final-iteration flow on a labeled dataset."""
    model, cfg = model_from_checkpoint(ckpt)
    dataset = data_path if isinstance(data_path, Dataset) else _open_dataset(data_path, "--data")
    dataset.require_labels()
    if dataset.height % STRIDE or dataset.width % STRIDE:
        raise ShapeError(f"{dataset.root}: image size {dataset.height}x{dataset.width} "
                         f"is not a multiple of {STRIDE}")
    out = evaluate_model(model, dataset, cfg.n_iters, rule or cfg.f1_rule, count, cfg.batch_size)
    out["count"] = len(dataset) if count <= 0 else min(count, len(dataset))
    return out


__all__ = ["TrainConfig", "run_pretraining", "run_finetuning", "evaluate", "evaluate_model",
           "model_from_checkpoint", "predict_flows", "sequence_loss", "pretext_step_loss"]

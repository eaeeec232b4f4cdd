import numpy as np
import pytest

from mcva import trainer
from mcva.checkpoint import decode_checkpoint, encode_checkpoint
from mcva.config import TrainConfig
from mcva.errors import ConfigError, DatasetError, DivergedError, NumericalError, ShapeError
from mcva.model import TRANSFER_PREFIXES, FlowModel, load_parameters, parameter_arrays
from mcva.synthdata import Dataset, write_dataset
from mcva.trainer import evaluate, run_finetuning, run_pretraining

TINY = dict(feature_dim=8, context_dim=8, encoder_hidden=8, patch_dim=8, token_dim=8, latent_tokens=2,
            agt_pairs=1, hidden_dim=8, head_hidden=16, n_iters=2, batch_size=2)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root / "lab", 4, 0, 64, 64, labeled=True)
    write_dataset(root / "unl", 2, 1, 64, 64)
    write_dataset(root / "small", 2, 2, 32, 32, labeled=True)
    return {k: Dataset(str(root / k)) for k in ("lab", "unl", "small")}


def cfg(phase, **kw):
    return TrainConfig(phase=phase, **{"steps": 3, **TINY, **kw})


def test_zero_steps_returns_initialisation(data):
    ckpt = run_pretraining(cfg("pretrain", steps=0), dataset=data["unl"])
    init = parameter_arrays(FlowModel(cfg("pretrain").validate()))
    assert set(ckpt.params) == set(init)
    assert all(ckpt.params[k].tobytes() == init[k].tobytes() for k in init)


def test_pretraining_is_deterministic_and_logged(data, tmp_path):
    log = tmp_path / "p.log"
    a = run_pretraining(cfg("pretrain", log=str(log)), dataset=data["unl"])
    b = run_pretraining(cfg("pretrain"), dataset=data["unl"])
    assert a.history["loss"] == b.history["loss"]
    lines = log.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("step=1 phase=pretrain loss=") and " lr=" in lines[0]


@pytest.mark.parametrize("strategy", ["block", "random", "none"])
def test_frozen_encoders_unchanged_by_pretraining(data, strategy):
    c = cfg("pretrain", mask_strategy=strategy)
    ckpt = run_pretraining(c, dataset=data["unl"])
    fresh = FlowModel(c.validate())
    trained = load_parameters(FlowModel(c.validate()), ckpt.params)
    assert trained.image_encoder.checksum() == fresh.image_encoder.checksum()
    assert trained.context_encoder.checksum() == fresh.context_encoder.checksum()
    assert trained.cost_encoder.named_parameters()["latent"].data.tobytes() != \
        fresh.cost_encoder.named_parameters()["latent"].data.tobytes()


def test_masking_that_would_hide_every_cell_rejected(data):
    # 32x32 images give an 8x8 grid, so each base mask has one cell
    with pytest.raises(ConfigError, match="masks all 1"):
        run_pretraining(cfg("pretrain"), dataset=data["small"])
    assert len(run_pretraining(cfg("pretrain", mask_ratio=0.4), dataset=data["small"]).history["loss"]) == 3


def test_masking_needs_grid_divisible_by_eight(tmp_path):
    write_dataset(tmp_path / "odd", 1, 3, 48, 48)
    with pytest.raises(ShapeError, match="divisible by 8"):
        run_pretraining(cfg("pretrain"), dataset=Dataset(str(tmp_path / "odd")))


def test_non_finite_loss_aborts(data, monkeypatch):
    def boom(*args, **kw):
        raise NumericalError("loss is not finite")

    monkeypatch.setattr(trainer, "pretext_step_loss", boom)
    with pytest.raises(DivergedError, match="step 1"):
        run_pretraining(cfg("pretrain"), dataset=data["unl"])


def test_finetune_from_scratch_and_from_pretrained(data):
    pre = run_pretraining(cfg("pretrain", steps=2), dataset=data["unl"])
    runs = {}
    for name, init in (("scratch", None), ("pretrained", pre)):
        runs[name] = run_finetuning(cfg("finetune", eval_every=2), init, dataset=data["lab"],
                                    val_dataset=data["lab"])
        assert len(runs[name].history["loss"]) == 3
        assert [s for s, _, _ in runs[name].history["val"]] == [2, 3]
    # the transferred groups start from the pretrained values, so after training they still differ from scratch
    model = load_parameters(FlowModel(cfg("finetune").validate()), pre.params, prefixes=TRANSFER_PREFIXES)
    assert model.image_encoder.checksum() == load_parameters(
        FlowModel(cfg("finetune").validate()), runs["pretrained"].params).image_encoder.checksum()
    assert runs["scratch"].history["loss"] != runs["pretrained"].history["loss"]


def test_finetune_needs_labels(data):
    with pytest.raises(DatasetError):
        run_finetuning(cfg("finetune"), dataset=data["unl"])


def test_finetune_with_trainable_context_encoder(data):
    ckpt = run_finetuning(cfg("finetune", freeze_context_encoder=False, steps=2), dataset=data["lab"])
    fresh = FlowModel(cfg("finetune").validate())
    trained = load_parameters(FlowModel(cfg("finetune").validate()), ckpt.params)
    assert trained.context_encoder.checksum() != fresh.context_encoder.checksum()
    assert trained.image_encoder.checksum() == fresh.image_encoder.checksum()


def test_evaluate_reports_metrics(data, tmp_path):
    ckpt = run_finetuning(cfg("finetune", steps=1), dataset=data["lab"])
    ckpt = decode_checkpoint(encode_checkpoint(ckpt))
    m = evaluate(ckpt, data["lab"], count=3)
    assert m["count"] == 3 and m["aepe"] >= 0 and 0 <= m["f1_all"] <= 100
    with pytest.raises(DatasetError):
        evaluate(ckpt, data["unl"])


def test_checkpoint_bytes_stable_across_reload(data):
    raw = encode_checkpoint(run_pretraining(cfg("pretrain", steps=1), dataset=data["unl"]))
    assert encode_checkpoint(decode_checkpoint(raw)) == raw


def test_mismatched_checkpoint_shape():
    small = parameter_arrays(FlowModel(cfg("finetune").validate()))
    wide = FlowModel(cfg("finetune", token_dim=12).validate())
    with pytest.raises(ShapeError):
        load_parameters(wide, small)


def test_sequence_loss_weights():
    from mcva.tensor import Tensor

    gt = np.zeros((1, 2, 1, 1))
    flows = [Tensor(np.full((1, 2, 1, 1), v)) for v in (1.0, 2.0, 3.0)]
    loss = trainer.sequence_loss(flows, gt, 0.8).data
    assert loss == pytest.approx(0.64 * 1 + 0.8 * 2 + 3)

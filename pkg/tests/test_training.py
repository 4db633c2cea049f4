import numpy as np
import pytest
import torch
import torch.nn as nn

from latsep.data import make_synthetic
from latsep.errors import ConfigError, TrainingDivergedError
from latsep.models import LATENT_DIMS, build_model
from latsep.training import (
    ModelCheckpoint,
    TrainConfig,
    evaluate,
    extract_latents,
    train,
)


class ConstantModel(nn.Module):
    """Always predicts a fixed class with probability ~1."""

    def __init__(self, target, num_classes=10):
        super().__init__()
        self.target = target
        self.num_classes = num_classes
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        logits = torch.zeros(len(x), self.num_classes)
        logits[:, self.target] = 100.0
        return logits


def test_train_config_validates_decay_epochs():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, lr_decay_epochs=(5, 5))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, lr_decay_epochs=(5, 12))
    cfg = TrainConfig(epochs=10, lr_decay_epochs=(4, 8))
    assert cfg.lr_decay_epochs == (4, 8)


def test_train_config_roundtrip():
    cfg = TrainConfig(architecture="resnet20", epochs=5, lr_decay_epochs=(2, 4), seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def tiny_checkpoint():
    ds = make_synthetic(300, seed=5)
    cfg = TrainConfig(epochs=2, lr_decay_epochs=(1,), batch_size=64, seed=1, augment=False)
    return train(ds, cfg), ds


def test_train_produces_checkpoint(tiny_checkpoint):
    ckpt, ds = tiny_checkpoint
    assert ckpt.architecture == "resnet20"
    assert "train_accuracy" in ckpt.metrics
    assert ckpt.dataset_digest


def test_checkpoint_roundtrip(tmp_path, tiny_checkpoint):
    ckpt, ds = tiny_checkpoint
    path = tmp_path / "ckpt.pt"
    ckpt.save(path)
    loaded = ModelCheckpoint.load(path)
    assert loaded.architecture == ckpt.architecture
    assert loaded.train_config == ckpt.train_config
    assert loaded.dataset_digest == ckpt.dataset_digest
    for k, v in ckpt.state_dict.items():
        assert torch.equal(loaded.state_dict[k], v)


def test_training_is_reproducible():
    ds = make_synthetic(200, seed=6)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), batch_size=64, seed=7, augment=True)
    a = train(ds, cfg)
    b = train(ds, cfg)
    for k in a.state_dict:
        assert torch.equal(a.state_dict[k], b.state_dict[k]), k


def test_training_divergence_raises():
    ds = make_synthetic(150, seed=8)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), lr=1e12, batch_size=32, seed=0, augment=False)
    with pytest.raises(TrainingDivergedError):
        train(ds, cfg)


def test_extract_latents_shape_and_determinism(tiny_checkpoint):
    ckpt, ds = tiny_checkpoint
    images = np.concatenate([ds.images[:4], ds.images[:4]])  # duplicated rows
    lat = extract_latents(ckpt, images)
    assert lat.shape == (8, 64)
    assert np.array_equal(lat[:4], lat[4:])
    assert not np.all(lat == 0)


@pytest.mark.parametrize("arch", ["resnet20", "vgg16", "mobilenetv2"])
def test_latent_dimensions_per_architecture(arch):
    model = build_model(arch, num_classes=10).eval()
    x = torch.zeros(2, 3, 32, 32)
    feats = model.features(x)
    assert feats.shape == (2, LATENT_DIMS[arch])
    assert model(x).shape == (2, 10)


def test_evaluate_constant_predictor():
    ds = make_synthetic(300, seed=9)
    t = 4
    model = ConstantModel(t)
    out = evaluate(model, ds, trigger_fn=lambda x: x, target_class=t)
    prior = float((ds.labels == t).mean())
    assert out["asr"] == pytest.approx(1.0)
    assert out["clean_accuracy"] == pytest.approx(prior)


def test_evaluate_without_trigger_has_no_asr(tiny_checkpoint):
    ckpt, ds = tiny_checkpoint
    out = evaluate(ckpt, ds)
    assert "asr" not in out
    assert 0.0 <= out["clean_accuracy"] <= 1.0


def test_evaluate_pass_through_equals_misclassification_rate(tiny_checkpoint):
    ckpt, ds = tiny_checkpoint
    t = 0
    out = evaluate(ckpt, ds, trigger_fn=lambda x: x, target_class=t)
    model = ckpt.model()
    from latsep.training import predict

    pred = predict(model, ds.images[ds.labels != t])
    assert out["asr"] == pytest.approx(float((pred == t).mean()))


def test_evaluate_requires_target_with_trigger(tiny_checkpoint):
    ckpt, ds = tiny_checkpoint
    with pytest.raises(ConfigError):
        evaluate(ckpt, ds, trigger_fn=lambda x: x)


def test_empty_dataset_rejected():
    from latsep.data import ImageDataset

    empty = ImageDataset("empty", np.zeros((0, 32, 32, 3)), np.zeros(0), 10)
    with pytest.raises(ConfigError):
        train(empty, TrainConfig(epochs=1, lr_decay_epochs=()))


def test_gtsrb_augmentation_recipe_runs():
    ds = make_synthetic(120, seed=10)
    cfg = TrainConfig(epochs=1, lr_decay_epochs=(), batch_size=64, augment=True,
                      aug_recipe="gtsrb", seed=2)
    ckpt = train(ds, cfg)
    assert ckpt.metrics["train_accuracy"] >= 0.0

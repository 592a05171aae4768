"""Supervised pretraining of the source segmentation model on clean scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .data import SegSample, source_set
from .errors import ConfigurationError, UsageError
from .masking import upscale
from .metrics import ConfusionMatrix
from .models import SegNet, predict_labels
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    num_train: int = 160
    num_heldout: int = 40
    epochs: int = 6
    batch: int = 8
    lr: float = 2e-3
    width: int = 32
    erase_prob: float = 0.5

    def __post_init__(self):
        if min(self.num_train, self.num_heldout, self.batch, self.width) < 1 or self.epochs < 0:
            raise ConfigurationError("pretrain counts must be positive")
        if self.lr < 0 or not 0.0 <= self.erase_prob <= 1.0:
            raise ConfigurationError("pretrain lr must be >= 0 and erase_prob in [0, 1]")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; class axis -3."""
    k = logits.shape[-3]
    onehot = (np.arange(k).reshape((k, 1, 1)) == labels[..., None, :, :]).astype(np.float64)
    shifted = logits - logits.data.max(axis=-3, keepdims=True)
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=-3))
    picked = ad.tsum(ad.mul(shifted, onehot), axis=-3)
    return ad.mean(lse - picked)


def random_erase(images: np.ndarray, gen: np.random.Generator, prob: float) -> np.ndarray:
    """Grid-erasing augmentation: per image, with probability ``prob``, zero or
    saturate a random fraction of cells of a random-size grid."""
    out = images.copy()
    h, w = images.shape[-2:]
    for i in range(len(out)):
        if gen.random() >= prob:
            continue
        s = int(gen.choice([8, 16, 32]))
        ratio = gen.uniform(0.0, 0.85)
        keep = upscale(gen.random((s, s)) >= ratio, h, w)
        out[i][:, ~keep] = float(gen.integers(0, 2))
    return out


def evaluate(model, samples: list[SegSample]) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.num_classes)
    for s in samples:
        cm.update(predict_labels(model, s.image), s.label)
    return cm


def train_segnet(samples: list[SegSample], num_classes: int, cfg: PretrainConfig,
                 seed: int = 0) -> SegNet:
    if not samples:
        raise UsageError("empty training set")
    model = SegNet(num_classes, cfg.width, seed=rngmod.derive_seed(seed, "pretrain", 0))
    opt = Adam(model.parameters(), lr=cfg.lr)
    order_rng = rngmod.stream(seed, "pretrain", 1)
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            batch = random_erase(images[idx], order_rng, cfg.erase_prob) if cfg.erase_prob else images[idx]
            loss = cross_entropy(model(Tensor(batch)), labels[idx])
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        log.info("pretrain epoch %d: loss %.4f", epoch + 1, float(np.mean(losses)))
    return model


def pretrain_source(seed: int, cfg: PretrainConfig = PretrainConfig(), H: int = 48, W: int = 64,
                    K: int = 5) -> tuple[SegNet, float]:
    """Train on generated clean scenes; return the model and held-out clean mIoU."""
    train = source_set(seed, cfg.num_train, H, W, K, split="train")
    heldout = source_set(seed, cfg.num_heldout, H, W, K, split="heldout")
    model = train_segnet(train, K, cfg, seed)
    return model, evaluate(model, heldout).miou()

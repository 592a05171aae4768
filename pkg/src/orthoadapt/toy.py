"""Angle versus magnitude: what a trained convolution actually encodes.

A small convolutional autoencoder is trained with ordinary inner-product
layers.  At test time every layer output ``w . p`` (kernel ``w``, input
patch ``p``) is replaced by either its magnitude ``|w| |p|`` or its angle
``cos(w, p)``; reconstructions from the angle alone stay close to the input
while magnitude-only ones do not.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .data import encode_ppm, gen_scene
from .errors import ConfigurationError, UsageError
from .nn import Conv2d, Module
from .optim import Adam

log = logging.getLogger(__name__)

MODES = ("inner", "magnitude", "angle")
EPS_ANGLE = 1e-8


@dataclass(frozen=True)
class ToyConfig:
    num_train: int = 24
    num_heldout: int = 16
    size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    batch: int = 24
    widths: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 3

    def __post_init__(self):
        if self.size % 8:
            raise ConfigurationError(f"image size must be a multiple of 8, got {self.size}")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be odd")
        if min(self.num_train, self.num_heldout, self.epochs, self.batch) < 1:
            raise ConfigurationError("counts must be >= 1")


class ToyAutoencoder(Module):
    """Three stride-2 convolutions down, three (nearest upsample + convolution) up.

    Layers carry no bias so that every output factorises exactly into
    magnitude times angle. ReLU follows every layer but the last. The
    downsampling layers use ``kernel + 1`` so that stride 2 halves even
    extents exactly.
    """

    def __init__(self, widths=(16, 32, 64), kernel: int = 3, in_ch: int = 3, seed: int = 0):
        super().__init__()
        gen = np.random.default_rng(seed)
        c1, c2, c3 = widths
        pad = kernel // 2
        down = kernel + 1
        self.enc1 = Conv2d(in_ch, c1, down, stride=2, pad=pad, bias=False, rng=gen)
        self.enc2 = Conv2d(c1, c2, down, stride=2, pad=pad, bias=False, rng=gen)
        self.enc3 = Conv2d(c2, c3, down, stride=2, pad=pad, bias=False, rng=gen)
        self.dec1 = Conv2d(c3, c2, kernel, pad=pad, bias=False, rng=gen)
        self.dec2 = Conv2d(c2, c1, kernel, pad=pad, bias=False, rng=gen)
        self.dec3 = Conv2d(c1, in_ch, kernel, pad=pad, bias=False, rng=gen)

    def layers(self) -> list[tuple[Conv2d, bool]]:
        """(layer, upsample-before) in forward order."""
        return [(self.enc1, False), (self.enc2, False), (self.enc3, False),
                (self.dec1, True), (self.dec2, True), (self.dec3, True)]

    def forward(self, x) -> Tensor:
        h = ad.as_tensor(x)
        plan = self.layers()
        for i, (layer, up) in enumerate(plan):
            if up:
                h = ad.resize(h, 2 * h.shape[-2], 2 * h.shape[-1], "nearest")
            h = layer(h)
            if i < len(plan) - 1:
                h = ad.relu(h)
        return h


def mode_conv(x: np.ndarray, layer: Conv2d, mode: str) -> np.ndarray:
    """One convolution with its inner product replaced according to ``mode``."""
    if mode not in MODES:
        raise UsageError(f"unknown reconstruction mode {mode!r}; expected one of {MODES}")
    squeeze = x.ndim == 3
    x4 = x[None] if squeeze else x
    n, _, h, w = x4.shape
    k, s, p = layer.k, layer.stride, layer.pad
    ho, wo = ad.conv_out_extent(h, k, s, p), ad.conv_out_extent(w, k, s, p)
    with ad.no_grad():
        cols = ad.unfold(x4, k, s, p).data
    wmat = layer.weight.data.reshape(layer.weight.shape[0], -1)
    inner = cols @ wmat.T
    if mode == "inner":
        z = inner
    else:
        norms = np.linalg.norm(cols, axis=1)[:, None] * np.linalg.norm(wmat, axis=1)[None, :]
        # the guard only bites below EPS_ANGLE, so inner = magnitude * angle stays exact elsewhere
        z = norms if mode == "magnitude" else inner / np.maximum(norms, EPS_ANGLE)
    out = z.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return out[0] if squeeze else out


def reconstruct(model: ToyAutoencoder, x: np.ndarray, mode: str = "inner") -> np.ndarray:
    """Forward pass with every layer in ``mode``; weights are only read."""
    if mode not in MODES:
        raise UsageError(f"unknown reconstruction mode {mode!r}; expected one of {MODES}")
    h = np.asarray(x, dtype=np.float64)
    plan = model.layers()
    for i, (layer, up) in enumerate(plan):
        if up:
            h = h.repeat(2, axis=-2).repeat(2, axis=-1)
        h = mode_conv(h, layer, mode)
        if i < len(plan) - 1:
            h = np.maximum(h, 0.0)
    return h


def toy_images(seed: int, n: int, size: int, split: str) -> np.ndarray:
    seeds = [rngmod.derive_seed(seed, "toy", 0 if split == "train" else 1, i) for i in range(n)]
    return np.stack([gen_scene(s, size, size).image for s in seeds])


def train_autoencoder(images: np.ndarray, epochs: int = 200, lr: float = 1e-3, batch: int = 8,
                      widths=(16, 32, 64), kernel: int = 3, seed: int = 0,
                      ) -> tuple[ToyAutoencoder, list[float]]:
    """MSE training with Adam; returns the model and the mean loss of every epoch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise UsageError("training needs a non-empty (N, 3, H, W) image stack")
    model = ToyAutoencoder(widths, kernel, images.shape[1],
                           seed=rngmod.derive_seed(seed, "toy", 2))
    opt = Adam(model.trainable_parameters(), lr=lr)
    order_rng = rngmod.stream(seed, "toy", 3)
    history = []
    for epoch in range(epochs):
        perm = order_rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(images), batch):
            xb = images[perm[start : start + batch]]
            diff = model(xb) - xb
            loss = ad.mean(diff * diff)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(xb)
        history.append(total / len(images))
        if epoch % 50 == 0 or epoch == epochs - 1:
            log.debug("toy epoch %d mse %.6f", epoch, history[-1])
    return model, history


@dataclass(frozen=True)
class ModeComparison:
    mse_inner: float
    mse_magnitude: float
    mse_angle: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "mse"])
        for mode in MODES:
            w.writerow([mode, f"{getattr(self, 'mse_' + mode):.10g}"])
        return buf.getvalue()


def triptych(x: np.ndarray, magnitude: np.ndarray, angle: np.ndarray, gap: int = 2) -> np.ndarray:
    """Input, magnitude and angle reconstructions side by side, clipped to [0, 1]."""
    c, h, _ = x.shape
    sep = np.ones((c, h, gap))
    return np.clip(np.concatenate([x, sep, magnitude, sep, angle], axis=2), 0.0, 1.0)


def compare_modes(model: ToyAutoencoder, heldout: np.ndarray, out_dir=None) -> ModeComparison:
    """Held-out reconstruction MSE per mode; optionally writes PPM triptychs and ``modes.csv``."""
    heldout = np.asarray(heldout, dtype=np.float64)
    recs = {m: reconstruct(model, heldout, m) for m in MODES}
    result = ModeComparison(*(float(((recs[m] - heldout) ** 2).mean()) for m in MODES))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(heldout):
            img = triptych(x, recs["magnitude"][i], recs["angle"][i])
            (out / f"triptych_{i:03d}.ppm").write_bytes(encode_ppm(img))
        (out / "modes.csv").write_text(result.to_csv(), encoding="utf-8")
    return result


def run_toy(seed: int = 0, cfg: ToyConfig = ToyConfig(), out_dir=None,
            ) -> tuple[ModeComparison, list[float]]:
    """Generate data, train, and compare modes for one seed."""
    train = toy_images(seed, cfg.num_train, cfg.size, "train")
    heldout = toy_images(seed, cfg.num_heldout, cfg.size, "heldout")
    model, history = train_autoencoder(train, cfg.epochs, cfg.lr, cfg.batch, cfg.widths,
                                       cfg.kernel, seed)
    result = compare_modes(model, heldout, out_dir)
    log.info("toy seed %d: inner %.5f magnitude %.5f angle %.5f", seed,
             result.mse_inner, result.mse_magnitude, result.mse_angle)
    return result, history

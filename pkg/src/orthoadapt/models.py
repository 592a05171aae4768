"""The small fully convolutional segmentation network used by the benchmark."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import Conv2d, Module


class SegNet(Module):
    """Two-resolution encoder with a skip connection and a 1x1 class head.

    ``enc1`` 5x5 at full resolution, ``enc2`` 4x4 stride-2 down, ``enc3`` 3x3
    at half resolution, bilinear upsampling back and summed with ``enc1``
    features, then ``head`` maps to class logits. Input height and width
    must be even. Accepts (3, H, W) or (N, 3, H, W); returns logits with
    the class axis at position -3.
    """

    def __init__(self, num_classes: int = 5, width: int = 32, in_ch: int = 3, seed: int = 0):
        super().__init__()
        gen = np.random.default_rng(seed)
        self.enc1 = Conv2d(in_ch, width, 5, stride=1, pad=2, rng=gen)
        self.enc2 = Conv2d(width, width, 4, stride=2, pad=1, rng=gen)
        self.enc3 = Conv2d(width, width, 3, stride=1, pad=1, rng=gen)
        self.head = Conv2d(width, num_classes, 1, rng=gen)
        self.num_classes = num_classes
        self.in_ch = in_ch
        self.width = width

    def forward(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"SegNet needs even spatial extents, got {h}x{w}")
        f1 = ad.relu(self.enc1(x))
        f2 = ad.relu(self.enc2(f1))
        f3 = ad.relu(self.enc3(f2))
        up = ad.resize(f3, h, w, "bilinear")
        return self.head(f1 + up)


def predict_labels(model: Module, x) -> np.ndarray:
    """Argmax class map of ``model`` on ``x`` without recording a graph."""
    with ad.no_grad():
        logits = model(x)
    return np.argmax(logits.data, axis=-3)

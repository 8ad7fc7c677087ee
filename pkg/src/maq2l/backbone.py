"""Convolutional feature extractor and the CAM head that feeds the
decoder's attention mask.

The extractor is a stack of 3x3 conv + ReLU stages with a stride
schedule; it preserves the (C, H, W) feature contract of the full-size
model at desk scale. The CAM head is a GAP + linear classifier whose
weight matrix, fused with the live feature map, yields the per-class
spatial mask: mask[p, n] = sum_c X[c, p] * W[c, n].
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


class ConvStage:
    def __init__(self, c_in, c_out, stride, rng):
        scale = math.sqrt(2.0 / (c_in * 9))
        self.kernels = T.randn(rng, (c_out, c_in, 3, 3), scale, requires_grad=True)
        self.bias = T.zeros((c_out, 1, 1), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return T.relu(T.conv2d(x, self.kernels, self.stride) + self.bias)

    def parameters(self):
        return {"weight": self.kernels, "bias": self.bias}


class Backbone:
    """Feature extractor: image (3, h, w) -> features (C_out, H, W)."""

    def __init__(self, channels=(16, 32, 64), strides=(2, 2, 2), in_channels=3, rng=None):
        if len(channels) != len(strides):
            raise ConfigError(f"{len(channels)} channel sizes for {len(strides)} strides")
        if rng is None:
            rng = np.random.default_rng(0)
        self.stages = []
        c = in_channels
        for c_out, s in zip(channels, strides):
            self.stages.append(ConvStage(c, c_out, s, rng))
            c = c_out
        self.out_channels = c
        self.total_stride = int(np.prod(strides))
        self.in_channels = in_channels

    def extract_features(self, image: T.Tensor) -> T.Tensor:
        if image.ndim != 3 or image.shape[0] != self.in_channels:
            raise ShapeError(f"expected ({self.in_channels}, h, w) image, got {image.shape}")
        _, h, w = image.shape
        if h % self.total_stride or w % self.total_stride:
            raise ConfigError(
                f"input {h}x{w} not divisible by the total stride {self.total_stride}")
        x = image
        for stage in self.stages:
            x = stage(x)
        return x

    __call__ = extract_features

    def parameters(self):
        out = {}
        for i, stage in enumerate(self.stages):
            for k, v in stage.parameters().items():
                out[f"stage{i}.{k}"] = v
        return out


class CamHead:
    """GAP + linear classifier; its weights generate the attention mask."""

    def __init__(self, c_in, n_classes, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = T.randn(rng, (c_in, n_classes), math.sqrt(1.0 / c_in), requires_grad=True)
        self.bias = T.zeros((n_classes,), requires_grad=True)
        self.c_in = c_in
        self.n_classes = n_classes

    def _check(self, x):
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"expected ({self.c_in}, H, W) features, got {x.shape}")

    def cam_logits(self, x: T.Tensor) -> T.Tensor:
        """Classification logits from pooled features (the auxiliary output)."""
        self._check(x)
        pooled = T.global_avg_pool(x).reshape(1, self.c_in)
        return T.matmul(pooled, self.weight).reshape(self.n_classes) + self.bias

    def attention_mask(self, x: T.Tensor) -> T.Tensor:
        """Per-position class scores, (H*W, N). No bias term."""
        self._check(x)
        c, h, w = x.shape
        flat = x.reshape(c, h * w).transpose()          # (HW, C)
        return T.matmul(flat, self.weight)              # (HW, N)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

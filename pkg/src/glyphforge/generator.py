"""U-Net generator: strided encoder to a 1x1 bottleneck, mirrored decoder
with same-depth skip concatenation, tanh output head.

The bottleneck feature map is exposed by both encode() and generate() so the
feature-consistency loss can compare real and generated encodings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .ndgrad import RngState, ShapeError, Tensor
from .params import ParamStore


class ConfigError(ValueError):
    """Network configuration violates a structural constraint."""


DOWNSAMPLE_MODES = ("strided_conv", "maxpool_after_conv")


def encoder_channels(depth, base, cap):
    """Per-level encoder widths: doubling from base, capped."""
    return [min(base * (1 << i), cap) for i in range(depth)]


@dataclass
class GeneratorConfig:
    side: int = 256
    depth: int = 8
    base_channels: int = 64
    channel_cap: int = 512
    init_seed: int = 0
    norm: bool = True
    downsample: str = "strided_conv"
    dropout_p: float = 0.5
    dropout_levels: int = 3
    dtype: type = np.float32

    def validate(self):
        if self.side < 8 or self.side & (self.side - 1):
            raise ConfigError(f"side must be a power of two >= 8, got {self.side}")
        if self.depth < 3:
            raise ConfigError(f"depth must be >= 3, got {self.depth}")
        if self.side != 1 << self.depth:
            raise ConfigError(f"side {self.side} != 2^depth (depth={self.depth})")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.downsample not in DOWNSAMPLE_MODES:
            raise ConfigError(f"downsample must be one of {DOWNSAMPLE_MODES}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must lie in [0,1), got {self.dropout_p}")


class Generator:
    """Encoder-decoder generator over (N,1,S,S) glyph tensors."""

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamStore()
        self.channels = encoder_channels(cfg.depth, cfg.base_channels, cfg.channel_cap)
        self._init_rng = RngState(cfg.init_seed)
        self._build()

    # layers where dropout applies: the decoder levels nearest the
    # bottleneck, never the output layer
    def _dropout_levels(self):
        return set(range(1, min(self.cfg.dropout_levels, self.cfg.depth - 1) + 1))

    def _normal(self, shape, std=0.02):
        w = self._init_rng.draw().normal(0.0, std, size=shape)
        return w.astype(self.cfg.dtype)

    def _add_conv(self, name, c_in, c_out, k):
        self.params.add(f"{name}.w", self._normal((c_out, c_in, k, k)))
        self.params.add(f"{name}.b", np.zeros(c_out, dtype=self.cfg.dtype))

    def _add_tconv(self, name, c_in, c_out, k):
        self.params.add(f"{name}.w", self._normal((c_in, c_out, k, k)))
        self.params.add(f"{name}.b", np.zeros(c_out, dtype=self.cfg.dtype))

    def _add_norm(self, name, c):
        self.params.add(f"{name}.gamma", np.ones(c, dtype=self.cfg.dtype))
        self.params.add(f"{name}.beta", np.zeros(c, dtype=self.cfg.dtype))
        self.params.add(f"{name}.running_mean", np.zeros(c, dtype=self.cfg.dtype), trainable=False)
        self.params.add(f"{name}.running_var", np.ones(c, dtype=self.cfg.dtype), trainable=False)

    def _enc_has_norm(self, level):
        # no norm on the first layer (raw pixels in) nor on the bottleneck
        # layer, whose 1x1 spatial extent degenerates at batch size 1
        return self.cfg.norm and 1 < level < self.cfg.depth

    def _dec_has_norm(self, level):
        return self.cfg.norm and level < self.cfg.depth

    def _build(self):
        cfg, ch = self.cfg, self.channels
        strided = cfg.downsample == "strided_conv"
        for i in range(1, cfg.depth + 1):
            c_in = 1 if i == 1 else ch[i - 2]
            c_out = ch[i - 1]
            self._add_conv(f"enc{i}", c_in, c_out, 4 if strided else 3)
            if self._enc_has_norm(i):
                self._add_norm(f"enc{i}.norm", c_out)
        for i in range(1, cfg.depth + 1):
            if i == 1:
                c_in = ch[cfg.depth - 1]
            else:
                c_in = ch[cfg.depth - i] + ch[cfg.depth - i]
            c_out = ch[cfg.depth - 1 - i] if i < cfg.depth else 1
            self._add_tconv(f"dec{i}", c_in, c_out, 4)
            if self._dec_has_norm(i):
                self._add_norm(f"dec{i}.norm", c_out)

    def _norm_apply(self, name, h, mode):
        p = self.params
        return ndgrad.batchnorm2d(
            h,
            p[f"{name}.gamma"],
            p[f"{name}.beta"],
            p[f"{name}.running_mean"],
            p[f"{name}.running_var"],
            mode,
        )

    def _check_input(self, x):
        s = self.cfg.side
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"generator expects (N,1,{s},{s}) input, got {x.shape}")

    def _encode(self, x, mode):
        cfg = self.cfg
        strided = cfg.downsample == "strided_conv"
        h = x
        skips = []
        for i in range(1, cfg.depth + 1):
            w = self.params[f"enc{i}.w"]
            b = self.params[f"enc{i}.b"]
            if strided:
                h = ndgrad.conv2d(h, w, b, stride=2, pad=1)
            else:
                h = ndgrad.conv2d(h, w, b, stride=1, pad=1)
            if self._enc_has_norm(i):
                h = self._norm_apply(f"enc{i}.norm", h, mode)
            h = ndgrad.leaky_relu(h, 0.2)
            if not strided:
                h = ndgrad.maxpool2d(h, 2, 2)
            if i < cfg.depth:
                skips.append(h)
        return h, skips

    def encode(self, x, mode="eval"):
        """Run the encoder; returns (bottleneck, per-level skip activations).

        The bottleneck has spatial extent 1x1; skips holds one entry per
        encoder level above it, shallowest first.
        """
        self._check_input(x)
        return self._encode(x, mode)

    def generate(self, x, mode="eval", rng=None, ablate_skips=()):
        """Full forward pass; returns (output in (-1,1), bottleneck).

        Train mode applies dropout on the decoder levels nearest the
        bottleneck, drawing masks from rng; eval mode is deterministic.
        ablate_skips is a diagnostic: encoder levels listed there feed
        zeros into their skip connection, for wiring-liveness checks.
        """
        self._check_input(x)
        if mode == "train" and rng is None and self.cfg.dropout_p > 0:
            raise ndgrad.ParameterError("train-mode generate requires an RngState")
        cfg = self.cfg
        bottleneck, skips = self._encode(x, mode)
        drop_levels = self._dropout_levels()
        h = bottleneck
        for i in range(1, cfg.depth + 1):
            if i > 1:
                skip = skips[cfg.depth - i]
                if cfg.depth - i + 1 in ablate_skips:
                    skip = Tensor(np.zeros_like(skip.data))
                h = ndgrad.concat_channels(h, skip)
            w = self.params[f"dec{i}.w"]
            b = self.params[f"dec{i}.b"]
            h = ndgrad.conv2d_transpose(h, w, b, stride=2, pad=1)
            if self._dec_has_norm(i):
                h = self._norm_apply(f"dec{i}.norm", h, mode)
            if i < cfg.depth:
                h = ndgrad.relu(h)
                if i in drop_levels and cfg.dropout_p > 0:
                    h = ndgrad.dropout(h, cfg.dropout_p, mode, rng)
            else:
                h = ndgrad.tanh(h)
        return h, bottleneck


def build_generator(cfg: GeneratorConfig) -> Generator:
    """Construct a generator with seed-deterministic N(0, 0.02) init."""
    return Generator(cfg)

"""Conditional patch discriminator.

Scores (source, candidate) pairs as a grid of per-patch real/fake
probabilities: the two images are channel-concatenated, pushed through
strided 4x4 conv blocks, and a stride-1 head maps to one sigmoid channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .generator import ConfigError, encoder_channels
from .ndgrad import RngState, ShapeError
from .params import ParamStore


@dataclass
class DiscriminatorConfig:
    side: int = 256
    levels: int = 3
    base_channels: int = 64
    init_seed: int = 0
    norm: bool = True
    dtype: type = np.float32

    def validate(self):
        if self.side < 2 or self.side & (self.side - 1):
            raise ConfigError(f"side must be a power of two, got {self.side}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.side < (1 << self.levels):
            raise ConfigError(f"side {self.side} too small for {self.levels} strided levels")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")


class Discriminator:
    """PatchGAN-style classifier over channel-paired glyph tensors."""

    def __init__(self, cfg: DiscriminatorConfig):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamStore()
        cap = 8 * cfg.base_channels
        self.channels = encoder_channels(cfg.levels, cfg.base_channels, cap)
        self._init_rng = RngState(cfg.init_seed)
        self._build()

    def _normal(self, shape, std=0.02):
        return self._init_rng.draw().normal(0.0, std, size=shape).astype(self.cfg.dtype)

    def _build(self):
        cfg, ch = self.cfg, self.channels
        for i in range(1, cfg.levels + 1):
            c_in = 2 if i == 1 else ch[i - 2]
            c_out = ch[i - 1]
            self.params.add(f"lvl{i}.w", self._normal((c_out, c_in, 4, 4)))
            self.params.add(f"lvl{i}.b", np.zeros(c_out, dtype=cfg.dtype))
            if cfg.norm and i > 1:
                self.params.add(f"lvl{i}.norm.gamma", np.ones(c_out, dtype=cfg.dtype))
                self.params.add(f"lvl{i}.norm.beta", np.zeros(c_out, dtype=cfg.dtype))
                self.params.add(
                    f"lvl{i}.norm.running_mean", np.zeros(c_out, dtype=cfg.dtype), trainable=False
                )
                self.params.add(
                    f"lvl{i}.norm.running_var", np.ones(c_out, dtype=cfg.dtype), trainable=False
                )
        self.params.add("head.w", self._normal((1, ch[-1], 4, 4)))
        self.params.add("head.b", np.zeros(1, dtype=cfg.dtype))

    def discriminate(self, source, candidate, mode="train"):
        """Per-patch probabilities in (0,1), shape (N,1,hp,wp).

        Gradients flow into the candidate, which is what lets the generator
        optimize its adversarial term through a frozen discriminator.
        """
        cfg = self.cfg
        s = cfg.side
        for name, t in (("source", source), ("candidate", candidate)):
            if t.ndim != 4 or t.shape[1] != 1 or t.shape[2] != s or t.shape[3] != s:
                raise ShapeError(f"discriminator expects (N,1,{s},{s}) {name}, got {t.shape}")
        if source.shape[0] != candidate.shape[0]:
            raise ShapeError(
                f"batch axis differs: source {source.shape[0]} vs candidate {candidate.shape[0]}"
            )
        h = ndgrad.concat_channels(source, candidate)
        for i in range(1, cfg.levels + 1):
            h = ndgrad.conv2d(h, self.params[f"lvl{i}.w"], self.params[f"lvl{i}.b"], stride=2, pad=1)
            if cfg.norm and i > 1:
                h = ndgrad.batchnorm2d(
                    h,
                    self.params[f"lvl{i}.norm.gamma"],
                    self.params[f"lvl{i}.norm.beta"],
                    self.params[f"lvl{i}.norm.running_mean"],
                    self.params[f"lvl{i}.norm.running_var"],
                    mode,
                )
            h = ndgrad.leaky_relu(h, 0.2)
        h = ndgrad.conv2d(h, self.params["head.w"], self.params["head.b"], stride=1, pad=1)
        return ndgrad.sigmoid(h)

    def score_shape(self, batch):
        """Closed-form output shape for a given batch size."""
        s = self.cfg.side >> self.cfg.levels
        hp = s + 2 - 4 + 1
        return (batch, 1, hp, hp)

    def receptive_field(self):
        """(extent, jump, offset) of one output cell's input coverage.

        A cell at output index o sees input pixels [o*jump - offset,
        o*jump - offset + extent - 1] along each axis, clipped to the image.
        """
        layers = [(4, 2, 1)] * self.cfg.levels + [(4, 1, 1)]
        extent, jump, offset = 1, 1, 0
        for k, s, p in layers:
            extent += (k - 1) * jump
            offset += p * jump
            jump *= s
        return extent, jump, offset


def build_discriminator(cfg: DiscriminatorConfig) -> Discriminator:
    """Construct a discriminator with seed-deterministic N(0, 0.02) init."""
    return Discriminator(cfg)

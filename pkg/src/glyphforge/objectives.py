"""The four training losses and the two composite objectives.

All losses are scalar tensor expressions built from engine ops, so their
gradients come out of the same reverse pass as everything else. Reported
values are float64 regardless of the training dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .ndgrad import ParameterError, ShapeError, Tensor

CHEAT_EPS = 1e-7


class DivergenceError(RuntimeError):
    """A loss term became non-finite; carries the offending report fragment."""

    def __init__(self, message, fragment=None):
        super().__init__(message)
        self.fragment = fragment or {}


@dataclass
class LossWeights:
    """Weights of the generator's composite objective; all dimensionless."""

    l1: float = 100.0
    const: float = 15.0
    cheat: float = 1.0
    tv: float = 1e-4

    def validate(self):
        for name, v in self.as_dict().items():
            if not math.isfinite(v) or v < 0:
                raise ParameterError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_dict(self):
        return {"l1": self.l1, "const": self.const, "cheat": self.cheat, "tv": self.tv}


@dataclass
class LossReport:
    """Unweighted loss parts plus totals for one training step."""

    l1: float = 0.0
    constant: float = 0.0
    cheat: float = 0.0
    tv: float = 0.0
    g_total: float = 0.0
    d_real: float = 0.0
    d_fake: float = 0.0
    d_total: float = 0.0
    step: int = 0
    batch_size: int = 0

    def composition_residual(self, w: LossWeights):
        """|g_total - weighted recombination|; must stay within 1e-9."""
        total = w.cheat * self.cheat + w.l1 * self.l1 + w.const * self.constant + w.tv * self.tv
        return abs(self.g_total - total)


def _check_same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def l1_loss(target, generated):
    """Mean absolute pixel difference over every element."""
    _check_same_shape(target, generated, "l1_loss")
    return (target - generated).abs().mean()


def constant_loss(fa, fb, batch_reduce="mean"):
    """Mean squared difference between two encoder feature-map batches.

    Each sample's squared difference is normalized by its element count M;
    batch_reduce selects mean (default) or sum over the batch axis.
    """
    _check_same_shape(fa, fb, "constant_loss")
    if batch_reduce not in ("mean", "sum"):
        raise ParameterError(f"batch_reduce must be mean or sum, got {batch_reduce!r}")
    loss = ((fa - fb) ** 2).mean()
    if batch_reduce == "sum":
        loss = loss * fa.shape[0]
    return loss


def cheat_loss(scores, labels):
    """Binary cross-entropy over patch probabilities.

    scores are clamped to [CHEAT_EPS, 1-CHEAT_EPS] before the logs, so a
    saturated sigmoid still yields a finite loss. labels may be a scalar or
    an array of the scores' shape, with every value in {0, 1}.
    """
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ParameterError("cheat_loss labels must all lie in {0, 1}")
    if y.ndim == 0:
        y = np.full(scores.shape, float(y), dtype=scores.dtype.type)
    elif y.shape != scores.shape:
        raise ShapeError(f"cheat_loss: labels shape {y.shape} != scores shape {scores.shape}")
    yt = Tensor(y.astype(scores.dtype.type, copy=False))
    p = scores.clamp(CHEAT_EPS, 1.0 - CHEAT_EPS)
    term = p.log() * yt + (1.0 - p).log() * (1.0 - yt)
    return -term.mean()


def tv_loss(img):
    """Anisotropic squared total variation, normalized by the pixel count."""
    if img.ndim != 4:
        raise ShapeError(f"tv_loss: expected (N,C,S,S) input, got {img.shape}")
    n, c, h, w = img.shape
    if h < 2 or w < 2:
        raise ShapeError(f"tv_loss: spatial extent ({h},{w}) must be >= 2")
    dh = ndgrad.crop2d(img, 0, h, 1, w) - ndgrad.crop2d(img, 0, h, 0, w - 1)
    dv = ndgrad.crop2d(img, 1, h, 0, w) - ndgrad.crop2d(img, 0, h - 1, 0, w)
    return ((dh ** 2).sum() + (dv ** 2).sum()) / img.size


def _scalar(t):
    return float(np.asarray(t.data, dtype=np.float64).reshape(()))


def generator_objective(parts, weights: LossWeights):
    """Weighted sum of the generator's four loss parts.

    parts maps {"l1", "constant", "cheat", "tv"} to scalar tensors. Returns
    (total tensor, report fragment of unweighted float parts); a non-finite
    part raises DivergenceError carrying the fragment.
    """
    weights.validate()
    frag = {name: _scalar(t) for name, t in parts.items()}
    for name in ("l1", "constant", "cheat", "tv"):
        if name not in parts:
            raise ParameterError(f"generator_objective: missing part {name!r}")
        if not math.isfinite(frag[name]):
            raise DivergenceError(f"non-finite generator loss part {name}", frag)
    total = (
        parts["cheat"] * weights.cheat
        + parts["l1"] * weights.l1
        + parts["constant"] * weights.const
        + parts["tv"] * weights.tv
    )
    frag["g_total"] = (
        weights.cheat * frag["cheat"]
        + weights.l1 * frag["l1"]
        + weights.const * frag["constant"]
        + weights.tv * frag["tv"]
    )
    return total, frag


def discriminator_objective(real_scores, fake_scores):
    """BCE(real, 1) + BCE(fake, 0); the candidate side must be detached."""
    if real_scores.shape[0] != fake_scores.shape[0]:
        raise ShapeError(
            f"discriminator_objective: batch axis differs "
            f"({real_scores.shape[0]} vs {fake_scores.shape[0]})"
        )
    d_real = cheat_loss(real_scores, 1.0)
    d_fake = cheat_loss(fake_scores, 0.0)
    total = d_real + d_fake
    frag = {
        "d_real": _scalar(d_real),
        "d_fake": _scalar(d_fake),
        "d_total": _scalar(d_real) + _scalar(d_fake),
    }
    for name in ("d_real", "d_fake"):
        if not math.isfinite(frag[name]):
            raise DivergenceError(f"non-finite discriminator loss part {name}", frag)
    return total, frag

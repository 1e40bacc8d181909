"""Segmentation, discriminator and adversarial objectives.

All terms are sums over pixels and over the batch, never means, so the
balancing weights keep their meaning regardless of image size.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, DataError
from .tensor import Tensor

IGNORE_LABEL = 255
SOURCE = 1
TARGET = 0


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: tuple = (1.0,)
    lambda_adv: tuple = (0.001,)

    def __post_init__(self):
        object.__setattr__(self, "lambda_seg", tuple(float(v) for v in self.lambda_seg))
        object.__setattr__(self, "lambda_adv", tuple(float(v) for v in self.lambda_adv))
        if len(self.lambda_seg) != len(self.lambda_adv):
            raise ConfigurationError(
                f"lambda_seg has {len(self.lambda_seg)} levels but lambda_adv has {len(self.lambda_adv)}")
        if len(self.lambda_seg) not in (1, 2):
            raise ConfigurationError("only one or two adaptation levels are supported")
        if min(self.lambda_seg + self.lambda_adv) < 0:
            raise ConfigurationError("loss weights must be non-negative")

    @property
    def levels(self):
        return len(self.lambda_seg)


def one_hot_mask(labels, n_classes):
    """Float mask [N,C,H,W] selecting each pixel's label; ignored pixels are all-zero."""
    labels = np.asarray(labels)
    bad = (labels >= n_classes) & (labels != IGNORE_LABEL)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[idx])} at pixel {idx} is outside [0, {n_classes - 1}]")
    valid = labels != IGNORE_LABEL
    mask = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], np.float32)
    for c in range(n_classes):
        mask[:, c] = (labels == c) & valid
    return mask


def seg_loss(prob, labels):
    """Cross-entropy -sum log P[label] of a softmax map against an [N,H,W] label map."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = prob.shape
    if labels.shape != (n, h, w):
        raise ConfigurationError(f"labels {labels.shape} do not match prediction {prob.shape}")
    mask = Tensor(one_hot_mask(labels, c))
    return T.scale(T.tsum(T.mul(mask, T.log(prob))), -1.0)


def disc_loss(sigma, z):
    """Two-class cross-entropy; ``sigma`` is the source probability, z=1 source, z=0 target."""
    if z == SOURCE:
        return T.scale(T.tsum(T.log(sigma)), -1.0)
    if z == TARGET:
        return T.scale(T.tsum(T.log(T.add(T.scale(sigma, -1.0), 1.0))), -1.0)
    raise ConfigurationError(f"domain label must be 0 or 1, got {z!r}")


def adv_loss(sigma_target):
    """Pushes target predictions toward being classified as source."""
    return disc_loss(sigma_target, SOURCE)


def ls_disc_loss(sigma, z):
    if z == SOURCE:
        return T.tsum(T.square(T.add(sigma, -1.0)))
    if z == TARGET:
        return T.tsum(T.square(sigma))
    raise ConfigurationError(f"domain label must be 0 or 1, got {z!r}")


def ls_adv_loss(sigma_target):
    return ls_disc_loss(sigma_target, SOURCE)


GAN_LOSSES = {
    "vanilla": (disc_loss, adv_loss),
    "least_squares": (ls_disc_loss, ls_adv_loss),
}


def total_g_loss(level_seg_losses, level_adv_losses, weights):
    """sum_i lambda_seg[i] * seg[i] + sum_i lambda_adv[i] * adv[i].

    ``level_adv_losses`` may be empty (no adaptation); otherwise both lists
    must match the number of weighted levels.
    """
    if len(level_seg_losses) != weights.levels:
        raise ConfigurationError(
            f"{len(level_seg_losses)} segmentation losses for {weights.levels} weighted levels")
    if level_adv_losses and len(level_adv_losses) != weights.levels:
        raise ConfigurationError(
            f"{len(level_adv_losses)} adversarial losses for {weights.levels} weighted levels")
    total = None
    terms = list(zip(level_seg_losses, weights.lambda_seg))
    terms += list(zip(level_adv_losses, weights.lambda_adv))
    for loss, lam in terms:
        if not isinstance(loss, Tensor):
            loss = Tensor(np.float32(loss))
        term = T.scale(loss, lam)
        total = term if total is None else T.add(total, term)
    return total

"""Loss weighted sampling: region partition, sample matrices, and the sampled cross-entropy.

A slice is split into four disjoint regions: S1 outside the brain, S2 normal brain,
S3 tumor interior and S4 a band straddling the tumor boundary. Each pixel of region
``i`` joins the loss with probability ``p_i``; sampled pixels weigh 1, except in S4
where they weigh ``alpha``. The loss is the weight-normalized cross-entropy.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ContractViolation, DegenerateBatchError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class RegionPartition:
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    s4: np.ndarray

    def regions(self):
        return (self.s1, self.s2, self.s3, self.s4)

    def counts(self):
        return tuple(int(s.sum()) for s in self.regions())


@dataclass(frozen=True)
class SamplingConfig:
    """Per-region sampling probabilities; ``p2=None`` means derive it from the balance rule."""

    p1: float = 0.0
    p2: float | None = None
    p3: float = 1.0
    p4: float = 1.0
    alpha: float = 1.0
    beta: float = 1.5

    def __post_init__(self):
        if self.alpha < 1:
            raise ContractViolation(f"alpha must be >= 1, got {self.alpha}")
        if self.beta < 1:
            raise ContractViolation(f"beta must be >= 1, got {self.beta}")
        for name in ("p1", "p2", "p3", "p4"):
            p = getattr(self, name)
            if p is not None and not 0.0 <= p <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1], got {p}")

    def resolve(self, partition):
        """Fill in ``p2`` from the region counts of ``partition`` if it is unset."""
        if self.p2 is not None:
            return self
        _, n2, n3, _ = partition.counts()
        return replace(self, p2=compute_p2(self.beta, self.p3, n3, n2))


def _chebyshev_ball(radius):
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def extract_contour_band(tumor_mask, width):
    """Pixels within Chebyshev distance ``ceil(width / 2)`` of the other side of the tumor boundary.

    Inside the tumor that is ``tumor - erode(tumor)``, outside it is
    ``dilate(tumor) - tumor``. Only pixels in the image count as neighbours.
    Accepts a single mask or a stack of masks along leading axes.
    """
    if width < 0:
        raise ContractViolation(f"width must be >= 0, got {width}")
    tumor = np.asarray(tumor_mask, dtype=bool)
    radius = math.ceil(width / 2)
    if radius == 0 or not tumor.any():
        return np.zeros_like(tumor)
    if tumor.ndim > 2:
        return np.stack([extract_contour_band(t, width) for t in tumor])
    ball = _chebyshev_ball(radius)
    outer = ndimage.binary_dilation(tumor, structure=ball, border_value=0)
    inner = ndimage.binary_erosion(tumor, structure=ball, border_value=1)
    return outer & ~inner


def partition_regions(labels, brain_mask, contour_width):
    labels = np.asarray(labels)
    brain = np.asarray(brain_mask, dtype=bool)
    if labels.shape != brain.shape:
        raise ContractViolation(f"labels {labels.shape} and brain mask {brain.shape} differ in shape")
    tumor = labels != 0
    if np.any(tumor & ~brain):
        raise ContractViolation("labels are nonzero outside the brain mask")
    band = extract_contour_band(tumor, contour_width) & brain
    return RegionPartition(s1=~brain, s2=brain & ~tumor & ~band, s3=tumor & ~band, s4=band)


def compute_p2(beta, p3, n_s3, n_s2):
    """Normal-brain sampling rate balancing ``beta`` negatives per sampled tumor pixel, capped at 1."""
    if n_s2 == 0:
        logger.info("no normal-brain pixels in batch; p2 set to 0")
        return 0.0
    return min(1.0, beta * p3 * n_s3 / n_s2)


def coverage_check(beta, p2, epochs):
    """True when ``beta * p2 * epochs >= 1``; warns otherwise."""
    if epochs < 1:
        raise ContractViolation(f"epochs must be >= 1, got {epochs}")
    covered = beta * p2 * epochs >= 1
    if not covered:
        warnings.warn(
            f"beta*p2*epochs = {beta * p2 * epochs:.3g} < 1: some normal-brain pixels may never enter the loss",
            RuntimeWarning,
            stacklevel=2,
        )
    return covered


def sample_matrix(partition, cfg, rng):
    """Random per-pixel weights: region ``i`` pixels are kept with probability ``p_i``.

    One uniform draw per pixel, so the result is a deterministic function of the
    generator state. Kept pixels weigh 1, or ``alpha`` in the contour band.
    """
    if cfg.p2 is None:
        cfg = cfg.resolve(partition)
    u = rng.random(partition.s1.shape)
    w = np.zeros(partition.s1.shape)
    for region, p, weight in zip(partition.regions(), (cfg.p1, cfg.p2, cfg.p3, cfg.p4), (1.0, 1.0, 1.0, cfg.alpha)):
        w[region & (u < p)] = weight
    return w


def stage_sampling_configs(alpha1=2.0, alpha2=1.0, beta=1.5):
    """(whole-tumor stage, substructure stage) sampling configurations."""
    first = SamplingConfig(p1=0.0, p2=None, p3=1.0, p4=1.0, alpha=alpha1, beta=beta)
    second = SamplingConfig(p1=0.0, p2=0.0, p3=1.0, p4=1.0, alpha=alpha2, beta=beta)
    return first, second


def uniform_sampling_config():
    return SamplingConfig(p1=1.0, p2=1.0, p3=1.0, p4=1.0, alpha=1.0, beta=1.0)


def weighted_cross_entropy(y, labels, w):
    """sum(-sum_c L log Y * W) / sum(W) over batch and pixels.

    ``y`` holds probabilities (b, c, h, w), ``labels`` the matching one-hot target and
    ``w`` the (b, h, w) weights. When ``y`` comes from ``softmax_channels`` the loss
    is computed from its logits by log-softmax and differentiated with respect to
    them directly. Otherwise probabilities are floored at 1e-12 inside the log.
    """
    y = T.as_tensor(y)
    labels = np.asarray(labels, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if y.data.ndim != 4 or labels.shape != y.shape:
        raise ContractViolation(f"probabilities {y.shape} and one-hot labels {labels.shape} must match")
    if w.shape != (y.shape[0],) + y.shape[2:]:
        raise ContractViolation(f"weights {w.shape} must be b x h x w for probabilities {y.shape}")
    total = w.sum()
    if total <= 0:
        raise DegenerateBatchError("sample matrix has zero total weight")
    scale = (w / total)[:, None]

    logits = y.softmax_logits
    if logits is not None:
        # log-softmax straight from the logits: no floor needed and no vanishing
        # gradient once the softmax saturates
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        log_y = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = np.sum(-np.sum(labels * log_y, axis=1) * w) / total

        def backward(g):
            return (g * (y.data * labels.sum(axis=1, keepdims=True) - labels) * scale,)

        return T.Tensor._from_op(loss, (logits,), backward)

    clipped = np.maximum(y.data, PROB_FLOOR)
    loss = np.sum(-np.sum(labels * np.log(clipped), axis=1) * w) / total

    def backward(g):
        live = y.data > PROB_FLOOR
        return (g * np.where(live, -labels / clipped, 0.0) * scale,)

    return T.Tensor._from_op(loss, (y,), backward)


def one_hot(index_map, classes):
    """(b, h, w) integer class indices -> (b, classes, h, w) float one-hot."""
    index_map = np.asarray(index_map)
    return (index_map[:, None] == np.arange(classes)[None, :, None, None]).astype(np.float64)


def total_loss(l1, l2, aux, omega, lam, params=None):
    """l1 + l2 + omega * sum(aux) + lam * sum of squared parameters."""
    if omega < 0 or lam < 0:
        raise ContractViolation("omega and lambda must be non-negative")
    loss = l1 + l2
    if aux:
        aux_sum = aux[0]
        for a in aux[1:]:
            aux_sum = aux_sum + a
        loss = loss + aux_sum * omega
    if lam and params is not None:
        for _, t in params:
            loss = loss + T.square_sum(t) * lam
    return loss

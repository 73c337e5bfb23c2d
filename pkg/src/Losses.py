import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from src.Errors import DomainError, NegativeDistance, ShapeMismatch, ThetaOutOfRange
from src.TensorCore import Tensor, lift

logger = logging.getLogger(__name__)


class AdversarialMode(str, Enum):
    ENTROPY = "Entropy"
    EARTH_MOVER = "EarthMover"


@dataclass
class LossConfig:
    theta: float = 0.5
    margin: float = 1.0
    adversarial_mode: AdversarialMode = AdversarialMode.ENTROPY
    # Critic weights are clipped to [-clip_value, clip_value] in EarthMover mode.
    clip_value: float = 0.01

    def __post_init__(self):
        self.adversarial_mode = AdversarialMode(self.adversarial_mode)
        if not 0.0 <= self.theta <= 1.0:
            raise ThetaOutOfRange(f"theta {self.theta} outside [0, 1]")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.clip_value <= 0:
            raise ValueError("clip_value must be positive")


def epv_loss(fmri: Tensor, pred: Tensor, voxel_dims: int = 1) -> Tensor:
    # Euclidean per volume: mean over volumes of ||diff|| / N_voxels.
    # The trailing `voxel_dims` axes form one volume; everything before indexes volumes.
    fmri, pred = lift(fmri), lift(pred)
    if fmri.shape != pred.shape:
        raise ShapeMismatch(f"epv: {fmri.shape} vs {pred.shape}")
    if fmri.ndim < voxel_dims + 1 or fmri.size == 0:
        raise ShapeMismatch(f"epv needs volumes x voxels, got {fmri.shape}")
    voxels = int(np.prod(fmri.shape[-voxel_dims:]))
    diff = (pred - fmri).reshape(-1, voxels)
    return (diff.norm(axis=-1) * (1.0 / voxels)).mean()


def mean_abs_distance(a: Tensor, b: Tensor) -> Tensor:
    # D_W for a batch of encodings [batch, ...] -> [batch]
    if a.shape != b.shape:
        raise ShapeMismatch(f"distance between {a.shape} and {b.shape}")
    batch = a.shape[0] if a.ndim > 0 else 1
    return (a - b).abs().reshape(batch, -1).mean(axis=1)


def contrastive_loss(d_w: Union[Tensor, float], y: Union[np.ndarray, int],
                     m: float) -> Tensor:
    # Y D^2 + (1-Y) max(0, m - D)^2, averaged when d_w holds a batch.
    d_w = lift(d_w)
    if (d_w.data < 0).any():
        raise NegativeDistance("contrastive distance must be non-negative")
    labels = np.broadcast_to(np.asarray(y, dtype=np.float64), d_w.shape)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("contrastive labels must be 0 or 1")
    y_t = Tensor(labels)
    pulled = y_t * d_w ** 2
    pushed = (1.0 - y_t) * (m - d_w).relu() ** 2
    return (pulled + pushed).mean()


def encoder_combined_loss(l_c: Tensor, l_r: Tensor, theta: float) -> Tensor:
    if not 0.0 <= theta <= 1.0:
        raise ThetaOutOfRange(f"theta {theta} outside [0, 1]")
    return lift(l_c) * theta + lift(l_r) * (1.0 - theta)


def _check_probabilities(*outputs: Tensor):
    for out in outputs:
        if not ((out.data > 0.0) & (out.data < 1.0)).all():
            raise DomainError("Entropy mode needs discriminator outputs strictly inside (0, 1)")


def discriminator_loss(d_real: Tensor, d_fake: Tensor, mode: AdversarialMode) -> Tensor:
    # Negated discriminator value; minimizing it maximizes the value.
    mode = AdversarialMode(mode)
    if mode == AdversarialMode.ENTROPY:
        _check_probabilities(d_real, d_fake)
        value = d_real.log().mean() + (1.0 - d_fake).log().mean()
    else:
        value = d_real.mean() + (1.0 - d_fake).mean()
    return -value


def generator_loss(d_fake: Tensor, mode: AdversarialMode) -> Tensor:
    mode = AdversarialMode(mode)
    if mode == AdversarialMode.ENTROPY:
        _check_probabilities(d_fake)
        return (1.0 - d_fake).log().mean()
    return -d_fake.mean()


def adversarial_losses(d_real: Tensor, d_fake: Tensor,
                       mode: AdversarialMode) -> Tuple[Tensor, Tensor]:
    return discriminator_loss(d_real, d_fake, mode), generator_loss(d_fake, mode)


def l1_penalty(weights: Iterable[Tensor], weight: float) -> Tensor:
    # weight * sum |w|; a constant zero when the weight is 0.
    if weight < 0:
        raise ValueError("L1 weight must be non-negative")
    total = Tensor(0.0)
    if weight == 0:
        return total
    for w in weights:
        total = total + w.abs().sum()
    return total * weight


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    # Rescales gradients in place so their global norm is at most max_norm.
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total

"""Training losses: reconstruction error, embedded similarity, and the
discriminative cross-entropy, combined into one differentiable scalar.

The reconstruction term is the mean of squared voxel differences.  The
similarity of an embedding z to per-class exemplar embeddings z_i is the
softmax of negative squared distances, P_i = exp(-|z - z_i|^2) / sum_j
exp(-|z - z_j|^2), computed with max-subtraction (exact, by softmax shift
invariance).  The discriminative term is -log P_label with the
probability clamped at 1e-12.  The total is recon + alpha * disc on one
graph, so backward reaches the encoder both through the reconstruction
and through every exemplar embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .ndgrad import Tensor

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Weight of the discriminative term and the training class count."""

    alpha: float = 1.0
    class_count: int = 2

    def __post_init__(self):
        if self.alpha < 0.0:
            raise UsageError(f"alpha must be nonnegative, got {self.alpha}")
        if self.class_count < 2:
            raise UsageError(f"class_count must be >= 2, got {self.class_count}")


@dataclass(frozen=True)
class ProbVector:
    """Class-membership probabilities as scalar graph nodes."""

    components: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.components) < 2:
            raise UsageError("probability vector needs at least 2 components")
        vals = self.values
        if (vals < 0.0).any():
            raise UsageError("negative probability component")
        if abs(float(vals.sum()) - 1.0) > 1e-9:
            raise UsageError(f"probabilities sum to {vals.sum()!r}, not 1")

    @property
    def values(self) -> np.ndarray:
        return np.array([c.item() for c in self.components])

    def __len__(self) -> int:
        return len(self.components)


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared voxel difference, (1/D) * sum((x - x_hat)^2)."""
    diff = x - x_hat
    return (diff * diff).sum() * (1.0 / x.data.size)


def embedded_similarity(z: Tensor, exemplars: list[Tensor]) -> ProbVector:
    """Softmax over negative squared distances from z to each exemplar."""
    if len(exemplars) < 2:
        raise UsageError("need at least 2 exemplars")
    for e in exemplars:
        if e.shape != z.shape:
            raise UsageError(
                f"exemplar length {e.shape} != embedding length {z.shape}"
            )
    scores = []
    for e in exemplars:
        diff = z - e
        scores.append(-((diff * diff).sum()))
    # Constant shift: exact under softmax invariance, prevents overflow.
    shift = max(float(s.data) for s in scores)
    exps = [(s - shift).exp() for s in scores]
    total = exps[0]
    for e in exps[1:]:
        total = total + e
    return ProbVector(tuple(e / total for e in exps))


def discriminative_loss(p: ProbVector, label: int) -> Tensor:
    """Cross-entropy against the one-hot label: -log max(P_label, 1e-12)."""
    if not 0 <= label < len(p):
        raise UsageError(f"label {label} outside 0..{len(p) - 1}")
    return -(p.components[label].clamp_min(PROB_CLAMP).log())


def total_loss(
    x: Tensor,
    x_hat: Tensor,
    z: Tensor,
    exemplars: list[Tensor],
    label: int,
    cfg: LossConfig,
) -> Tensor:
    """Combined objective: recon_loss + alpha * discriminative_loss.

    With alpha == 0 the result is exactly the reconstruction term and the
    exemplars are not touched.
    """
    recon = recon_loss(x, x_hat)
    if cfg.alpha == 0.0:
        return recon
    if len(exemplars) != cfg.class_count:
        raise UsageError(
            f"{len(exemplars)} exemplars for class_count {cfg.class_count}"
        )
    disc = discriminative_loss(embedded_similarity(z, exemplars), label)
    return recon + cfg.alpha * disc

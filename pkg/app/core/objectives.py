"""
SimGCD objectives: projection head, prototype classifier, contrastive
representation losses and self-distillation classification losses.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from app.core import numkernel as nk
from app.core.numkernel import Tensor
from app.models.config import HeadConfig, LossWeights
from app.validators.errors import GcdValidationError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6


@dataclass
class ProjectionHead:
    # g: Linear -> ReLU -> Linear, output l2-normalised
    weight1: Tensor
    bias1: Tensor
    weight2: Tensor
    bias2: Tensor

    @classmethod
    def init(cls, embed_dim: int, cfg: HeadConfig, rng: np.random.Generator) -> "ProjectionHead":
        return cls(
            weight1=nk.gaussian(rng, (cfg.hidden_dim, embed_dim), 1.0 / np.sqrt(embed_dim), requires_grad=True),
            bias1=nk.zeros((cfg.hidden_dim,), requires_grad=True),
            weight2=nk.gaussian(rng, (cfg.out_dim, cfg.hidden_dim), 1.0 / np.sqrt(cfg.hidden_dim),
                                requires_grad=True),
            bias2=nk.zeros((cfg.out_dim,), requires_grad=True),
        )

    def __call__(self, features: Tensor) -> Tensor:
        hidden = nk.relu(nk.linear(features, self.weight1, self.bias1))
        return nk.l2_normalize(nk.linear(hidden, self.weight2, self.bias2))

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"head.weight1": self.weight1, "head.bias1": self.bias1,
                "head.weight2": self.weight2, "head.bias2": self.bias2}


@dataclass
class Prototypes:
    weight: Tensor  # K x d, one learnable prototype per class

    @classmethod
    def init(cls, num_classes: int, embed_dim: int, rng: np.random.Generator) -> "Prototypes":
        # Rows start near unit norm
        std = 1.0 / np.sqrt(embed_dim)
        return cls(weight=nk.gaussian(rng, (num_classes, embed_dim), std, requires_grad=True))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"prototypes.weight": self.weight}


@dataclass
class ViewOutputs:
    # Both views of one batch: embeddings z, predictions p and frozen teacher targets q
    z: Tensor
    z_prime: Tensor
    p: Tensor
    p_prime: Tensor
    q: np.ndarray
    q_prime: np.ndarray


def _check_unit_rows(name: str, z: Tensor) -> None:
    norms = np.linalg.norm(z.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        raise GcdValidationError(f"{name} rows must be l2-normalised")


def _diagonal(matrix: Tensor) -> Tensor:
    n = matrix.shape[0]
    return matrix[np.arange(n), np.arange(n)]


def rep_loss_unsup(z: Tensor, z_prime: Tensor, tau_u: float) -> Tensor:
    """InfoNCE between paired views; every other sample in the batch is a negative."""
    if z.shape[0] < 2:
        raise GcdValidationError("contrastive loss needs a batch of at least 2 samples")
    _check_unit_rows("z", z)
    _check_unit_rows("z_prime", z_prime)
    log_probs = nk.log_softmax(nk.matmul(z, nk.transpose(z_prime)), temperature=tau_u, axis=1)
    return nk.neg(nk.mean(_diagonal(log_probs)))


def rep_loss_sup(z: Tensor, z_prime: Tensor, labels: np.ndarray, labeled_mask: np.ndarray,
                 tau_c: float) -> Tensor:
    """Supervised contrastive loss over the labeled subset; same-label pairs are positives."""
    index = np.flatnonzero(labeled_mask)
    if index.size == 0:
        logger.warning("batch has no labeled samples; supervised contrastive loss is 0")
        return nk.Tensor(0.0)

    z_l, z_prime_l = z[index], z_prime[index]
    _check_unit_rows("z", z_l)
    _check_unit_rows("z_prime", z_prime_l)
    label_l = np.asarray(labels)[index]
    positives = (label_l[:, None] == label_l[None, :]) & ~np.eye(index.size, dtype=bool)
    return contrastive_with_positives(z_l, z_prime_l, positives, tau_c)


def contrastive_with_positives(z: Tensor, z_prime: Tensor, positives: np.ndarray, tau: float) -> Tensor:
    """
    Sum of -log softmax_n(z_i . z'_n / tau) over the positives q of each anchor i,
    averaged over anchors with at least one positive.

    positives[i, q] marks z'_q as a positive of anchor z_i. rep_loss_sup marks the
    other labeled samples sharing i's label, so i's own second view is not one;
    marking exactly the diagonal gives rep_loss_unsup.
    """
    positives = np.asarray(positives, dtype=bool)
    if positives.shape != (z.shape[0], z_prime.shape[0]):
        raise GcdValidationError(f"positive mask {positives.shape} does not match {z.shape[0]} x {z_prime.shape[0]}")
    anchors = int(positives.any(axis=1).sum())
    if anchors == 0:
        return nk.Tensor(0.0)
    log_probs = nk.log_softmax(nk.matmul(z, nk.transpose(z_prime)), temperature=tau, axis=1)
    return nk.neg(nk.div(nk.sum_(nk.mul(log_probs, positives.astype(nk.DTYPE))), anchors))


def cosine_logits(features: Tensor, prototypes: Tensor) -> Tensor:
    if np.any(np.linalg.norm(features.data, axis=-1) == 0):
        raise GcdValidationError("feature vector has zero norm")
    if np.any(np.linalg.norm(prototypes.data, axis=-1) == 0):
        raise GcdValidationError("prototype has zero norm")
    return nk.matmul(nk.l2_normalize(features), nk.transpose(nk.l2_normalize(prototypes)))


def predict(features: Tensor, prototypes: Tensor, tau_s: float) -> Tensor:
    """Softmax over cosine similarity to each prototype."""
    return nk.softmax(cosine_logits(features, prototypes), temperature=tau_s)


def teacher_targets(logits: Tensor, tau_teacher: float) -> np.ndarray:
    """Sharpened, detached targets for self-distillation."""
    with nk.no_grad():
        return nk.softmax(logits.detach(), temperature=tau_teacher).data.copy()


def mean_entropy(p: Tensor, p_prime: Optional[Tensor] = None) -> Tensor:
    """Entropy of the batch-mean prediction."""
    mean_p = nk.mean(p, axis=0)
    if p_prime is not None:
        mean_p = nk.mul(nk.add(mean_p, nk.mean(p_prime, axis=0)), 0.5)
    return nk.neg(nk.sum_(nk.mul(mean_p, nk.log(mean_p))))


def _soft_cross_entropy(targets: np.ndarray, p: Tensor) -> Tensor:
    return nk.neg(nk.mean(nk.sum_(nk.mul(nk.log(p), targets), axis=1)))


def cls_losses(p: Tensor, p_prime: Tensor, q: np.ndarray, q_prime: np.ndarray,
               labels: np.ndarray, labeled_mask: np.ndarray,
               entropy_weight: float) -> Tuple[Tensor, Tensor]:
    """Returns (L_cls_u, L_cls_s); each view is supervised by the other view's teacher."""
    if entropy_weight < 0:
        raise GcdValidationError(f"entropy weight must be >= 0, got {entropy_weight}")

    distill = nk.mul(nk.add(_soft_cross_entropy(q_prime, p), _soft_cross_entropy(q, p_prime)), 0.5)
    cls_u = nk.sub(distill, nk.mul(mean_entropy(p, p_prime), entropy_weight))

    index = np.flatnonzero(labeled_mask)
    if index.size == 0:
        return cls_u, nk.Tensor(0.0)
    one_hot = np.zeros((index.size, p.shape[1]))
    one_hot[np.arange(index.size), np.asarray(labels)[index]] = 1.0
    cls_s = nk.mul(nk.add(_soft_cross_entropy(one_hot, p[index]),
                          _soft_cross_entropy(one_hot, p_prime[index])), 0.5)
    return cls_u, cls_s


def simgcd_loss(outputs: ViewOutputs, labels: np.ndarray, labeled_mask: np.ndarray,
                weights: LossWeights) -> Tuple[Tensor, Dict[str, Tensor]]:
    """(1-lam)(L_rep_u + L_cls_u) + lam(L_rep_s + L_cls_s), plus the raw components."""
    if not 0.0 <= weights.lam <= 1.0:
        raise GcdValidationError(f"lam must lie in [0, 1], got {weights.lam}")

    rep_u = rep_loss_unsup(outputs.z, outputs.z_prime, weights.tau_u)
    rep_s = rep_loss_sup(outputs.z, outputs.z_prime, labels, labeled_mask, weights.tau_c)
    cls_u, cls_s = cls_losses(outputs.p, outputs.p_prime, outputs.q, outputs.q_prime,
                              labels, labeled_mask, weights.entropy_weight)

    unsupervised = nk.mul(nk.add(rep_u, cls_u), 1.0 - weights.lam)
    supervised = nk.mul(nk.add(rep_s, cls_s), weights.lam)
    components = {"L_rep_u": rep_u, "L_rep_s": rep_s, "L_cls_u": cls_u, "L_cls_s": cls_s}
    return nk.add(unsupervised, supervised), components

"""Energy-based discriminator and the noise-contrastive objective.

The EBM scores an observation with ``log p(y) = -E(y) - c`` where ``c`` is a
learned log-partition constant. Against a CNP acting as the noise
distribution, the posterior that a point is real is
``sigmoid(log p_ebm - log p_cnp)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .diffcore import MLP, Module, Tensor


class NCEError(ValueError):
    pass


class EnergyModel(Module):
    """``E: R^{d_y} -> R`` as a one-hidden-layer MLP plus a trainable ``c``.

    With ``use_x`` the covariates are concatenated to the observation.
    """

    def __init__(self, d_y: int = 1, hidden: int = 128, rng: np.random.Generator | None = None,
                 use_x: bool = False, d_x: int = 1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.use_x = use_x
        self.energy = MLP([d_y + (d_x if use_x else 0), hidden, 1], rng)
        self.log_partition = Tensor(0.0, requires_grad=True)

    def log_prob(self, y, x=None) -> Tensor:
        y = dc.as_tensor(y)
        if self.use_x:
            if x is None:
                raise NCEError("this EBM conditions on covariates; pass x")
            y = dc.concat([dc.as_tensor(x), y], axis=-1)
        e = self.energy(y)
        return -e[..., 0] - self.log_partition


def ebm_log_prob(phi: EnergyModel, y, x=None) -> Tensor:
    return phi.log_prob(y, x)


def posterior_true(log_p_ebm, log_p_cnp):
    """Probability a point is real: ``sigmoid(log_p_ebm - log_p_cnp)``."""
    return expit(np.asarray(log_p_ebm, dtype=np.float64) - np.asarray(log_p_cnp, dtype=np.float64))


@dataclass
class NCETerms:
    value: Tensor
    logit_true: Tensor
    logit_fake: Tensor

    @property
    def posterior_true_side(self) -> np.ndarray:
        return expit(self.logit_true.data)

    @property
    def posterior_fake_side(self) -> np.ndarray:
        return expit(self.logit_fake.data)


def nce_terms(ebm_true, cnp_true, ebm_fake, cnp_fake, K: int = 1) -> NCETerms:
    """NCE value from log-densities of real and generated points.

    ``value = mean(log sigmoid(G(y))) + mean(log sigmoid(-G(y_fake))) - log(K) / n_true``
    with ``G = log p_ebm - log p_cnp``. The EBM ascends ``value``; the CNP
    descends it. Means rather than sums keep the scale independent of batch
    size; the ``log K`` constant is spread over the same count of point pairs
    and carries no gradient.
    """
    ebm_true, cnp_true = dc.as_tensor(ebm_true), dc.as_tensor(cnp_true)
    ebm_fake, cnp_fake = dc.as_tensor(ebm_fake), dc.as_tensor(cnp_fake)
    if ebm_true.size == 0 or ebm_fake.size == 0:
        raise NCEError("NCE needs at least one true and one fake point")
    if ebm_true.shape != cnp_true.shape or ebm_fake.shape != cnp_fake.shape:
        raise dc.ShapeError(f"log-density shapes differ: true {ebm_true.shape}/{cnp_true.shape}, "
                            f"fake {ebm_fake.shape}/{cnp_fake.shape}")
    g_true = ebm_true - cnp_true
    g_fake = ebm_fake - cnp_fake
    value = dc.mean(dc.log_sigmoid(g_true)) + dc.mean(dc.log_sigmoid(-g_fake))
    if K > 1:
        value = value - math.log(K) / ebm_true.size
    return NCETerms(value, g_true, g_fake)


def nce_objective(ebm_true, cnp_true, ebm_fake, cnp_fake, K: int = 1) -> Tensor:
    return nce_terms(ebm_true, cnp_true, ebm_fake, cnp_fake, K).value


def discriminator_accuracy(post_true, post_fake) -> float:
    """Share of points on the correct side of 0.5; exact ties count as wrong."""
    post_true = np.asarray(post_true).ravel()
    post_fake = np.asarray(post_fake).ravel()
    n = post_true.size + post_fake.size
    if n == 0:
        raise NCEError("accuracy of an empty batch")
    return float((np.sum(post_true > 0.5) + np.sum(post_fake < 0.5)) / n)


def roll_fakes(fake: Tensor, cnp_fake: Tensor, ratio: int):
    """Stack ``ratio`` copies of the fake batch, rolled across instances.

    Copy ``j`` hands instance ``k`` the generations of instance ``k + j``
    (mod K), so ``ratio`` is bounded by the batch size.
    """
    K = fake.shape[0]
    if not 1 <= ratio <= K:
        raise NCEError(f"noise-to-data ratio must lie in [1, {K}], got {ratio}")
    if ratio == 1:
        return fake, cnp_fake
    idx = np.concatenate([np.roll(np.arange(K), -j) for j in range(ratio)])
    return fake[idx], cnp_fake[idx]

"""Conditional neural process variants: CNP, attentive ACNP, contrastive CCNP."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import diffcore as dc
from .datasets import EpisodeBatch
from .diffcore import MLP, BatchNorm, Linear, Module, MultiHeadAttention, Tensor

VARIANTS = ("CNP", "ACNP", "CCNP")
LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "CNP"
    d_x: int = 1
    d_y: int = 1
    d_r: int = 64
    encoder_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 64)
    likelihood: Literal["gaussian", "bernoulli"] = "gaussian"
    sigma_min: float = 1e-3
    n_heads: int = 8
    self_attention: bool = False
    projector_hidden: int = 64
    projector_out: int = 64
    temperature: float = 0.1
    obs_net: Literal["identity", "affine"] = "identity"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ModelError(f"unknown likelihood {self.likelihood!r}")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)

    @classmethod
    def for_family(cls, family: str, variant: str = "CNP", **overrides) -> ModelConfig:
        """Architecture sizes used for each synthetic family."""
        if family == "gp-rbf":
            base = dict(d_r=128, encoder_hidden=(128, 128, 128), decoder_hidden=(128,) * 5,
                        projector_hidden=64, projector_out=64)
        else:
            base = dict(d_r=64, encoder_hidden=(64, 64), decoder_hidden=(64, 64),
                        projector_hidden=64, projector_out=64)
        base.update(overrides)
        return cls(variant=variant, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


@dataclass
class ContextRepr:
    """Aggregated context summary.

    ``r`` is ``(K, d_r)`` for mean-pooling variants; for ACNP it holds the
    per-point encodings ``(K, C, d_r)`` and ``x_context`` the matching
    covariates used as attention keys.
    """

    r: Tensor
    per_point: bool = False
    x_context: np.ndarray | None = None


@dataclass
class PredictiveDist:
    family: str
    mu: Tensor | None = None
    sigma: Tensor | None = None
    logits: Tensor | None = None

    @property
    def mean(self) -> np.ndarray:
        if self.family == "gaussian":
            return self.mu.data
        return dc.sigmoid(self.logits).data

    @property
    def p(self) -> Tensor:
        if self.family != "bernoulli":
            raise ModelError("p is only defined for the Bernoulli likelihood")
        return dc.sigmoid(self.logits)


class Projector(Module):
    """Linear -> BatchNorm -> ReLU -> Linear head for the contrastive term."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng):
        self.fc1 = Linear(d_in, hidden, rng)
        self.bn = BatchNorm(hidden)
        self.fc2 = Linear(hidden, d_out, rng)

    def __call__(self, r: Tensor) -> Tensor:
        return self.fc2(dc.relu(self.bn(self.fc1(r))))


class NeuralProcess(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.obs_net = Linear(c.d_y, c.d_y, rng) if c.obs_net == "affine" else None
        if self.obs_net is not None:
            self.obs_net.weight.data = np.eye(c.d_y)
        self.encoder = MLP([c.d_x + c.d_y, *c.encoder_hidden, c.d_r], rng)
        out_width = 2 * c.d_y if c.likelihood == "gaussian" else c.d_y
        self.decoder = MLP([c.d_x + c.d_r, *c.decoder_hidden, out_width], rng)
        self.qk_embed = self.cross_attention = self.self_attention = self.projector = None
        if c.variant == "ACNP":
            self.qk_embed = MLP([c.d_x, c.d_r, c.d_r], rng)
            self.cross_attention = MultiHeadAttention(c.d_r, c.n_heads, rng)
            if c.self_attention:
                self.self_attention = MultiHeadAttention(c.d_r, c.n_heads, rng)
        if c.variant == "CCNP":
            self.projector = Projector(c.d_r, c.projector_hidden, c.projector_out, rng)

    @property
    def variant(self) -> str:
        return self.config.variant

    def cnp_parameters(self) -> dict[str, Tensor]:
        return self.parameters()

    # -- encoder ---------------------------------------------------------
    def point_encodings(self, x_c, y_c) -> Tensor:
        y_c = dc.as_tensor(y_c)
        if y_c.shape[-2] == 0:
            raise ModelError("empty context set")
        if self.obs_net is not None:
            y_c = self.obs_net(y_c)
        return self.encoder(dc.concat([dc.as_tensor(x_c), y_c], axis=-1))

    def encode(self, x_c, y_c) -> ContextRepr:
        h = self.point_encodings(x_c, y_c)
        if self.variant == "ACNP":
            if self.self_attention is not None:
                h = self.self_attention(h, h, h)
            return ContextRepr(h, per_point=True, x_context=np.asarray(x_c))
        return ContextRepr(dc.mean(h, axis=-2))

    # -- decoder ---------------------------------------------------------
    def decode(self, x_t, rep: ContextRepr) -> PredictiveDist:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[-2] == 0:
            raise ModelError("empty target set")
        if rep.per_point != (self.variant == "ACNP"):
            raise ModelError(f"{self.variant} decoder received a "
                             f"{'per-point' if rep.per_point else 'pooled'} representation")
        d_x = self.config.d_x
        first = self.decoder.layers[0]
        w_x, w_r = first.weight[:d_x], first.weight[d_x:]
        if rep.per_point:
            queries = self.qk_embed(x_t)
            keys = self.qk_embed(rep.x_context)
            r_t = self.cross_attention(queries, keys, rep.r)
            h = dc.matmul(x_t, w_x) + r_t @ w_r + first.bias
        else:
            # (K, d_r) @ W_r once per instance, broadcast over its targets
            r_proj = (rep.r @ w_r).reshape(*rep.r.shape[:-1], 1, w_r.shape[-1])
            h = dc.matmul(x_t, w_x) + r_proj + first.bias
        h = dc.relu(h)
        last = len(self.decoder.layers) - 1
        for i, layer in enumerate(self.decoder.layers[1:], 1):
            h = layer(h, relu=i < last)
        return self._output(h)

    def _output(self, raw: Tensor) -> PredictiveDist:
        d_y = self.config.d_y
        if self.config.likelihood == "bernoulli":
            return PredictiveDist("bernoulli", logits=raw)
        mu = raw[..., :d_y]
        sigma = self.config.sigma_min + dc.softplus(raw[..., d_y:])
        return PredictiveDist("gaussian", mu=mu, sigma=sigma)

    def __call__(self, x_c, y_c, x_t) -> PredictiveDist:
        return self.decode(x_t, self.encode(x_c, y_c))

    def predict(self, episode: EpisodeBatch) -> PredictiveDist:
        return self(episode.x_context, episode.y_context, episode.x_target)

    def pooled_repr(self, x_c, y_c) -> Tensor:
        """Fixed-width context summary: the mean of per-point encodings."""
        return dc.mean(self.point_encodings(x_c, y_c), axis=-2)


def build_model(config: ModelConfig, seed: int | np.random.Generator = 0) -> NeuralProcess:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return NeuralProcess(config, rng)


def encode_context(model: NeuralProcess, x_c, y_c) -> ContextRepr:
    return model.encode(x_c, y_c)


def decode(model: NeuralProcess, x_t, rep: ContextRepr) -> PredictiveDist:
    return model.decode(x_t, rep)


# -- likelihoods ----------------------------------------------------------
def log_prob(dist: PredictiveDist, y) -> Tensor:
    """Per-target log-likelihood summed over observation dims, shape ``(..., T)``."""
    y = dc.as_tensor(y)
    if dist.family == "gaussian":
        if y.shape != dist.mu.shape:
            raise dc.ShapeError(f"observations {y.shape} vs predictive mean {dist.mu.shape}")
        z = (y - dist.mu) / dist.sigma
        lp = -0.5 * LOG_2PI - dc.log(dist.sigma) - 0.5 * dc.square(z)
    else:
        if y.shape != dist.logits.shape:
            raise dc.ShapeError(f"observations {y.shape} vs logits {dist.logits.shape}")
        if np.any((y.data < 0.0) | (y.data > 1.0)):
            raise ModelError("Bernoulli observations must lie in [0, 1]")
        lp = y * dc.log_sigmoid(dist.logits) + (1.0 - y) * dc.log_sigmoid(-dist.logits)
    return dc.sum_(lp, axis=-1)


def mle_loss(model: NeuralProcess, episode: EpisodeBatch, dist: PredictiveDist | None = None) -> Tensor:
    """Negative mean log-likelihood over every target point in the batch."""
    dist = model.predict(episode) if dist is None else dist
    return -dc.mean(log_prob(dist, episode.y_target))


def sample_predictions(dist: PredictiveDist, rng: np.random.Generator | None = None,
                       mode: str = "reparam", noise: np.ndarray | None = None) -> Tensor:
    """Generate fake observations from the predictive distribution.

    ``reparam`` draws ``mu + sigma * eps`` so gradients reach both mean and
    scale; ``mean`` returns the predictive mean. For the Bernoulli
    likelihood ``mean`` returns ``p`` (differentiable) and ``reparam`` draws
    hard 0/1 samples that carry no gradient.
    """
    if mode not in ("reparam", "mean"):
        raise ModelError(f"unknown sampling mode {mode!r}")
    if dist.family == "bernoulli":
        p = dist.p
        if mode == "mean":
            return p
        u = rng.random(p.shape) if noise is None else noise
        return Tensor((u < p.data).astype(np.float64))
    if mode == "mean":
        return dist.mu
    eps = rng.standard_normal(dist.mu.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    return dist.mu + dist.sigma * eps


# -- contrastive regularizer ----------------------------------------------
def l2_normalize(z: Tensor, eps: float = 1e-12) -> Tensor:
    return z / dc.sqrt(dc.sum_(dc.square(z), axis=-1, keepdims=True) + eps)


def info_nce(z1, z2, temperature: float) -> Tensor:
    """Symmetric InfoNCE between two views; row ``k`` of each is a positive pair.

    Inputs are used as given (normalize beforehand for cosine similarity).
    """
    z1, z2 = dc.as_tensor(z1), dc.as_tensor(z2)
    K = z1.shape[0]
    if K < 2:
        raise ModelError("contrastive loss needs at least two instances for negatives")
    logits = (z1 @ z2.transpose()) * (1.0 / temperature)
    diag = (np.arange(K), np.arange(K))
    forward = -dc.mean(dc.log_softmax(logits, axis=1)[diag])
    backward = -dc.mean(dc.log_softmax(logits, axis=0)[diag])
    return 0.5 * (forward + backward)


def split_context(episode: EpisodeBatch, rng: np.random.Generator):
    """Random disjoint halves of each context, sizes ceil(C/2) and floor(C/2)."""
    K, C = episode.K, episode.n_context
    if C < 2:
        raise ModelError("contrastive split needs at least two context points")
    perm = np.argsort(rng.random((K, C)), axis=1)
    half = (C + 1) // 2
    rows = np.arange(K)[:, None]
    a, b = perm[:, :half], perm[:, half:]
    return ((episode.x_context[rows, a], episode.y_context[rows, a]),
            (episode.x_context[rows, b], episode.y_context[rows, b]))


def ccnp_contrastive_loss(model: NeuralProcess, episode: EpisodeBatch, rng: np.random.Generator) -> Tensor:
    if model.projector is None:
        raise ModelError("contrastive loss requires a CCNP model")
    if episode.K < 2:
        raise ModelError("contrastive loss needs K >= 2")
    (xa, ya), (xb, yb) = split_context(episode, rng)
    za = l2_normalize(model.projector(model.pooled_repr(xa, ya)))
    zb = l2_normalize(model.projector(model.pooled_repr(xb, yb)))
    return info_nce(za, zb, model.config.temperature)

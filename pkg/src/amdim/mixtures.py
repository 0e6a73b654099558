"""Mixture-of-antecedents objective.

Each global feature f1 spawns k mixture features ``f1 + MLP_j(f1)``. For every
consequent i, component j earns the NCE log-softmax score ``s_ij`` (minus the
per-pair NCE loss) and the components share credit through

    q(j | i) = softmax_j(tau * s_ij)

which is the maximizer of ``sum_j q_j s_ij + H(q) / tau``. Scores are detached
inside q, so the loss is ``mean_i sum_j q_ij * loss_ij`` with q held fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nce import NCEConfig, consequents, directed_term, matching_scores, multiscale_amdim_loss, nce_loss, \
    pair_label, regularize_and_clip
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class MixtureConfig:
    k: int = 2
    tau: float = 5.0
    zero_init: bool = False
    pair: tuple = (1, 7)

    def __post_init__(self):
        self.pair = tuple(int(v) for v in self.pair)
        if self.k < 1:
            raise ConfigError("mixture k must be at least 1")
        if not self.tau > 0:
            raise ConfigError("mixture tau must be positive")
        if self.pair[0] != 1:
            raise ConfigError("mixture features are built from the global (scale 1) antecedent")


class MixtureHead(Module):
    """One ReLU hidden layer of width 2C emitting k residual offsets of f1."""

    def __init__(self, dim: int, k: int = 2, tau: float = 5.0, rng=None, zero_init: bool = False):
        if k < 1 or not tau > 0:
            raise ConfigError("need k >= 1 and tau > 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.k, self.tau = dim, k, float(tau)
        self.hidden = Linear(dim, 2 * dim, rng=rng)
        self.out = Linear(2 * dim, k * dim, rng=rng, gain=0.1)
        if zero_init:
            self.out.weight.data[...] = 0.0

    def __call__(self, f1: Tensor) -> Tensor:
        return mixture_features(f1, self)


def mixture_features(f1: Tensor, head: MixtureHead) -> Tensor:
    """[B, C] -> [B, k, C]; component j is f1 + MLP_j(f1)."""
    if f1.ndim != 2 or f1.shape[1] != head.dim:
        raise ShapeError(f"mixture head built for dimension {head.dim}, got features {f1.shape}")
    B = f1.shape[0]
    offsets = T.reshape(head.out(T.relu(head.hidden(f1))), (B, head.k, head.dim))
    return T.add(T.stack([f1] * head.k, axis=1), offsets)


@dataclass
class MixturePosterior:
    q: np.ndarray  # [..., k], rows sum to one

    def entropy(self) -> np.ndarray:
        q = self.q
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(q > 0, q * np.log(q), 0.0)
        return -plogp.sum(axis=-1)


def mixture_posterior(scores, tau: float) -> MixturePosterior:
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if not tau > 0:
        raise ConfigError("tau must be positive")
    if not np.all(np.isfinite(s)):
        raise ShapeError("non-finite mixture scores")
    z = tau * s
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return MixturePosterior(e / e.sum(axis=-1, keepdims=True))


def _component_losses(fa, fb, pair, cfg: NCEConfig, head: MixtureHead, phi1):
    B = fa.f1.shape[0]
    mix = mixture_features(T.reshape(fa.f1, (B, -1)), head)
    cons = consequents(fb, pair[1])
    pers, pens, block = [], [], None
    for j in range(head.k):
        ante = phi1(T.index(mix, (slice(None), j)))
        blk = matching_scores(ante, cons, None, pair_label(pair))
        clipped, pen = regularize_and_clip(blk, cfg.reg_weight, cfg.clip)
        _, per = nce_loss(clipped)
        pers.append(per)
        pens.append(pen)
        block = block or blk
    return pers, pens, block


def mixture_term(head: MixtureHead, phi1, pair=(1, 7)):
    """A ``term_fn`` for :func:`multiscale_amdim_loss` that mixes the chosen pair."""
    pair = tuple(pair)

    def term(fa, fb, p, cfg, rng):
        if tuple(p) != pair:
            return directed_term(fa, fb, p, cfg, rng) + ({},)
        pers, pens, block = _component_losses(fa, fb, p, cfg, head, phi1)
        s_nce = np.stack([-per.data for per in pers], axis=-1)  # [B, n_c, k]
        post = mixture_posterior(s_nce, head.tau)
        loss = None
        for j, per in enumerate(pers):
            weighted = T.mean(T.mul(per, Tensor(post.q[..., j], dtype=per.dtype)))
            loss = weighted if loss is None else T.add(loss, weighted)
        pen = pens[0]
        for extra in pens[1:]:
            pen = T.add(pen, extra)
        if head.k > 1:
            pen = T.scale(pen, 1.0 / head.k)
        usage = np.bincount(post.q.reshape(-1, head.k).argmax(axis=1), minlength=head.k) / post.q[..., 0].size
        return loss, pen, block, {"entropy": float(post.entropy().mean()), "usage": usage.tolist()}

    return term


def mixture_nce_objective(feats1, feats2, head: MixtureHead, nce_cfg: NCEConfig, phi1, rng=None,
                          pair=(1, 7)):
    """Multiscale loss with the (1, m) pair replaced by its mixture version; returns (loss, diag)."""
    return multiscale_amdim_loss(feats1, feats2, nce_cfg, rng, term_fn=mixture_term(head, phi1, pair))


# -- optimality of the closed-form posterior --------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(v)
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, v.shape[1] + 1)
    rho = (u - css / ind > 0).sum(axis=1)
    theta = css[np.arange(v.shape[0]), rho - 1] / rho
    return np.maximum(v - theta[:, None], 0.0)


def entropy_regularized_value(q: np.ndarray, s: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise ``sum_j q_j s_j + alpha H(q)``."""
    return (q * s).sum(axis=-1) + alpha * MixturePosterior(q).entropy()


def posterior_optimality_check(scores, tau: float, trials: int = 1000, rng=None, step: float = 0.3) -> dict:
    """Compare the closed-form posterior against random simplex points (alpha = 1/tau)."""
    if trials < 1:
        raise ConfigError("need at least one trial")
    rng = rng if rng is not None else np.random.default_rng(0)
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    alpha = 1.0 / tau
    q_star = mixture_posterior(s, tau).q
    best = entropy_regularized_value(q_star, s, alpha)
    worst_gap, beaten = np.inf, 0
    for t in range(trials):
        if t % 2 == 0:
            p = project_simplex(q_star + step * rng.standard_normal(s.shape))
        else:
            p = rng.dirichlet(np.ones(s.shape[1]), size=s.shape[0])
        gap = best - entropy_regularized_value(p, s, alpha)
        beaten += int(np.all(gap >= -1e-12))
        worst_gap = min(worst_gap, float(gap.min()))
    return {"trials": trials, "alpha": alpha, "value": best.tolist(), "min_margin": worst_gap,
            "beaten": beaten, "optimal": beaten == trials}

"""Batched NCE infomax objective over (antecedent, consequent) feature pairs.

A score block holds ``raw[a, b, c] = <phi(antecedent a), phi(consequent c of image b)>``.
Antecedent ``a`` belongs to image ``ante_image[a]``; its positives are the ``n_c``
consequents of that image and its negatives are every consequent of every other
image, so each positive competes against ``K = 1 + (n_a - 1) * n_c`` candidates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

SCALES = (1, 5, 7)
DEFAULT_PAIRS = ((1, 5), (1, 7), (5, 5))


def pair_label(pair) -> str:
    return f"{pair[0]}-{pair[1]}"


@dataclass
class ScoreBlock:
    raw: Tensor  # [n_ante, n_a, n_c]
    ante_image: np.ndarray
    label: str = ""

    @property
    def n_a(self) -> int:
        return self.raw.shape[1]

    @property
    def n_c(self) -> int:
        return self.raw.shape[2]

    @property
    def candidates(self) -> int:
        return 1 + (self.n_a - 1) * self.n_c

    def positive_mask(self) -> np.ndarray:
        mask = np.zeros(self.raw.shape, dtype=bool)
        mask[np.arange(self.raw.shape[0]), self.ante_image, :] = True
        return mask


@dataclass
class NCEConfig:
    reg_weight: float = 4e-2
    clip: float | None = 20.0
    scale_pairs: tuple = DEFAULT_PAIRS
    symmetrize: bool = True
    weights: dict = field(default_factory=dict)  # "n-m" -> weight, default 1.0
    antecedent_mode: str = "all"  # or "sample": one random position per image for n > 1

    def __post_init__(self):
        self.scale_pairs = tuple(tuple(int(v) for v in p) for p in self.scale_pairs)
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive (or None to disable)")
        if not self.scale_pairs:
            raise ConfigError("at least one scale pair is required")
        for p in self.scale_pairs:
            if len(p) != 2 or p[0] not in SCALES or p[1] not in SCALES:
                raise ConfigError(f"bad scale pair {p}; scales are {SCALES}")
        if self.antecedent_mode not in ("all", "sample"):
            raise ConfigError(f"unknown antecedent mode {self.antecedent_mode!r}")
        self.weights = {str(k): float(v) for k, v in self.weights.items()}
        unknown = set(self.weights) - {pair_label(p) for p in self.scale_pairs}
        if unknown:
            raise ConfigError(f"weights given for unused scale pairs {sorted(unknown)}")

    def weight(self, pair) -> float:
        return self.weights.get(pair_label(pair), 1.0)


def matching_scores(phi_ante: Tensor, phi_cons: Tensor, ante_image=None, label: str = "") -> ScoreBlock:
    """All antecedent/consequent dot products as one matrix product."""
    if phi_ante.ndim != 2 or phi_cons.ndim != 3 or phi_ante.shape[1] != phi_cons.shape[2]:
        raise ShapeError(f"cannot score antecedents {phi_ante.shape} against consequents {phi_cons.shape}")
    n_a, n_c, dim = phi_cons.shape
    if ante_image is None:
        if phi_ante.shape[0] != n_a:
            raise ShapeError("antecedent/image mapping required when counts differ")
        ante_image = np.arange(n_a)
    ante_image = np.asarray(ante_image, dtype=np.int64)
    flat = T.reshape(phi_cons, (n_a * n_c, dim))
    raw = T.reshape(T.matmul(phi_ante, T.transpose(flat)), (phi_ante.shape[0], n_a, n_c))
    return ScoreBlock(raw, ante_image, label)


def soft_clip(s: Tensor, c: float | None) -> Tensor:
    if c is None:
        return s
    return T.scale(T.tanh(T.scale(s, 1.0 / c)), c)


def positive_scores(block: ScoreBlock, scores: Tensor | None = None) -> Tensor:
    scores = block.raw if scores is None else scores
    return T.index(scores, (np.arange(scores.shape[0]), block.ante_image))


def regularize_and_clip(block: ScoreBlock, reg_weight: float, clip: float | None) -> tuple[ScoreBlock, Tensor]:
    """Penalty ``reg_weight * mean(raw_pos^2)`` on the raw scores, then ``c tanh(s / c)``."""
    pos = positive_scores(block)
    penalty = T.scale(T.mean(T.square(pos)), reg_weight)
    return ScoreBlock(soft_clip(block.raw, clip), block.ante_image, block.label), penalty


def _nce_per_pair(scores: Tensor, ante_image: np.ndarray) -> Tensor:
    s = scores.data
    n_ante, n_a, n_c = s.shape
    rows = np.arange(n_ante)
    pos = s[rows, ante_image]  # [n_ante, n_c]

    # one log-sum-exp over the negatives per antecedent, shared by all of its positives
    neg = s.reshape(n_ante, n_a * n_c).copy()
    own = (ante_image[:, None] * n_c + np.arange(n_c)[None, :])
    neg[rows[:, None], own] = -np.inf
    m = neg.max(axis=1, keepdims=True)
    w = np.exp(neg - m)
    z = w.sum(axis=1, keepdims=True)
    lse_neg = m + np.log(z)  # [n_ante, 1]
    total = np.logaddexp(pos, lse_neg)
    per = total - pos

    def bw(g):
        p_pos = np.exp(pos - total)
        g_lse = (g * (1.0 - p_pos)).sum(axis=1, keepdims=True)
        grad = (w / z) * g_lse  # zero on the masked own-image entries
        grad[rows[:, None], own] = g * (p_pos - 1.0)
        return (grad.reshape(s.shape),)

    return T._make(per, (scores,), bw)


def nce_loss(block: ScoreBlock) -> tuple[Tensor, Tensor]:
    """Return (mean loss, per-positive losses [n_ante, n_c]) for a clipped score block."""
    scores = block.raw
    if scores.shape[1] < 2:
        raise ShapeError("NCE needs at least two images (no negatives otherwise)")
    if not np.all(np.isfinite(scores.data)):
        raise ShapeError("non-finite matching scores")
    per = _nce_per_pair(scores, block.ante_image)
    return T.mean(per), per


def mi_bound_estimate(mean_loss: float, candidates: int) -> float:
    """NCE lower bound on mutual information, in nats: ln K - loss."""
    return math.log(candidates) - float(mean_loss)


# -- multiscale objective --------------------------------------------------

def antecedents(feats, n: int, mode: str = "all", rng: np.random.Generator | None = None):
    """Flatten scale-``n`` embeddings into antecedent rows plus their image indices."""
    _, phi = feats.scale(n)
    B = phi.shape[0]
    if n == 1:
        return phi, np.arange(B)
    D = phi.shape[1]
    rows = T.reshape(T.transpose(phi, (0, 2, 3, 1)), (B * n * n, D))
    image = np.repeat(np.arange(B), n * n)
    if mode == "sample":
        rng = rng or np.random.default_rng(0)
        pick = np.arange(B) * n * n + rng.integers(0, n * n, size=B)
        return T.index(rows, pick), np.arange(B)
    return rows, image


def consequents(feats, m: int) -> Tensor:
    _, phi = feats.scale(m)
    B, D = phi.shape[0], phi.shape[1]
    if m == 1:
        return T.reshape(phi, (B, 1, D))
    return T.reshape(T.transpose(phi, (0, 2, 3, 1)), (B, m * m, D))


def directed_term(fa, fb, pair, cfg: NCEConfig, rng=None):
    """One n-to-m cost with antecedents from ``fa`` and consequents from ``fb``."""
    n, m = pair
    ante, image = antecedents(fa, n, cfg.antecedent_mode, rng)
    block = matching_scores(ante, consequents(fb, m), image, pair_label(pair))
    clipped, penalty = regularize_and_clip(block, cfg.reg_weight, cfg.clip)
    loss, per = nce_loss(clipped)
    return loss, penalty, block


def _score_stats(block: ScoreBlock) -> dict:
    s = block.raw.data
    return {"mean": float(s.mean()), "std": float(s.std()), "min": float(s.min()), "max": float(s.max())}


def multiscale_amdim_loss(feats1, feats2, cfg: NCEConfig, rng=None, term_fn=None):
    """Weighted sum over scale pairs of (NCE loss + penalty), optionally symmetrized over views.

    ``term_fn(fa, fb, pair, cfg, rng)`` may replace the per-direction cost for some pairs
    (the mixture objective uses this); it must return (loss, penalty, block, extra_diag).
    """
    total = None
    diag = {}
    for pair in cfg.scale_pairs:
        w = cfg.weight(pair)
        if w == 0.0:
            continue
        dirs = [(feats1, feats2), (feats2, feats1)] if cfg.symmetrize else [(feats1, feats2)]
        losses, pens, extras = [], [], {}
        for fa, fb in dirs:
            if term_fn is not None:
                out = term_fn(fa, fb, pair, cfg, rng)
            else:
                out = directed_term(fa, fb, pair, cfg, rng) + ({},)
            loss, pen, block, extra = out
            losses.append(loss)
            pens.append(pen)
            for k_, v in extra.items():
                extras.setdefault(k_, []).append(v)
        loss = losses[0] if len(losses) == 1 else T.scale(T.add(losses[0], losses[1]), 0.5)
        pen = pens[0] if len(pens) == 1 else T.scale(T.add(pens[0], pens[1]), 0.5)
        term = T.add(loss, pen)
        weighted = term if w == 1.0 else T.scale(term, w)
        total = weighted if total is None else T.add(total, weighted)
        label = pair_label(pair)
        K = block.candidates
        diag[label] = {"loss": loss.item(), "penalty": pen.item(), "K": K,
                       "mi_bound": mi_bound_estimate(loss.item(), K), "scores": _score_stats(block)}
        for k_, v in extras.items():
            diag[label][k_] = v[0] if len(v) == 1 else np.mean(v, axis=0).tolist()
    if total is None:
        raise ConfigError("every scale pair has zero weight")
    return total, diag

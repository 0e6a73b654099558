"""Frozen-encoder evaluation: probes, cosine retrieval, mixture maps, and an MI sanity check."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import ImageBatch, resize_batch
from .checkpoint import state_hash
from .errors import ConfigError, ShapeError
from .mixtures import _component_losses, mixture_features, mixture_posterior
from .nce import NCEConfig, matching_scores, mi_bound_estimate, nce_loss, soft_clip
from .nn import Linear, Module
from .tensor import Tensor


# -- feature extraction ----------------------------------------------------

@dataclass
class FeatureTable:
    ids: np.ndarray
    f1: np.ndarray  # [N, C1]
    labels: np.ndarray | None = None
    is_test: np.ndarray | None = None
    phi1: np.ndarray | None = None  # [N, nrkhs]
    phi7: np.ndarray | None = None  # [N, nrkhs, 7, 7]

    def __len__(self):
        return len(self.ids)

    def row(self, image_id) -> int:
        hit = np.flatnonzero(self.ids == image_id)
        if hit.size == 0:
            raise ShapeError(f"unknown image id {image_id}")
        return int(hit[0])


def extract_features(encoder, dataset, batch_size: int = 256, maps: bool = False) -> FeatureTable:
    """One f1 vector per image, batch-norm in inference mode and no augmentation."""
    was_training = encoder.training
    encoder.eval()
    dtype = encoder.blocks[0].conv_a.weight.dtype
    f1, phi1, phi7 = [], [], []
    try:
        with T.no_grad():
            for start in range(0, len(dataset), batch_size):
                idx = np.arange(start, min(start + batch_size, len(dataset)))
                batch = ImageBatch(dataset.images(idx, dtype=dtype), dataset.ids[idx])
                if batch.data.shape[2] != encoder.config.input_size:
                    batch = resize_batch(batch, encoder.config.input_size)
                feats = encoder(batch)
                f1.append(feats.f1.data.reshape(len(idx), -1))
                if maps:
                    phi1.append(feats.phi1.data)
                    phi7.append(feats.phi7.data)
    finally:
        encoder.train(was_training)
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return FeatureTable(dataset.ids.copy(), cat(f1), None if dataset.labels is None else dataset.labels.copy(),
                        None if dataset.is_test is None else dataset.is_test.copy(), cat(phi1), cat(phi7))


# -- probes ----------------------------------------------------------------

@dataclass
class ProbeConfig:
    kind: str = "linear"
    hidden: int = 1024
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    batch_size: int = 256
    standardize: bool = True

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ConfigError(f"probe kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ConfigError("mlp probe needs hidden width >= 1")
        if self.epochs < 1 or self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigError("probe epochs, lr, batch size must be positive and weight decay non-negative")


class Probe(Module):
    def __init__(self, dim, n_classes, cfg: ProbeConfig, mean=None, std=None):
        rng = np.random.default_rng(cfg.seed)
        self.kind = cfg.kind
        if cfg.kind == "mlp":
            self.hidden = Linear(dim, cfg.hidden, rng=rng)
            self.out = Linear(cfg.hidden, n_classes, rng=rng, gain=1.0)
        else:
            self.out = Linear(dim, n_classes, rng=rng, gain=1.0)
        self.mean = np.zeros(dim) if mean is None else mean
        self.std = np.ones(dim) if std is None else std

    def logits(self, x) -> Tensor:
        h = Tensor((np.asarray(x, dtype=np.float64) - self.mean) / self.std)
        if self.kind == "mlp":
            h = T.relu(self.hidden(h))
        return self.out(h)

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            return self.logits(x).data.argmax(axis=1)


def split_by_id_hash(ids, test_fraction: float = 0.1) -> np.ndarray:
    """Deterministic held-out mask: an id is test when its hash lands in the bottom fraction."""
    buckets = np.array([int.from_bytes(hashlib.sha256(str(int(i)).encode()).digest()[:4], "little") for i in ids])
    return buckets < test_fraction * 2 ** 32


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=1)
    return T.scale(T.mean(T.index(logp, (np.arange(len(labels)), labels))), -1.0)


def train_probe(features, labels, cfg: ProbeConfig, test_mask=None, ids=None):
    """Fit a linear or one-hidden-layer classifier; returns (probe, held-out top-1 accuracy)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"need [N, C] features with one label each, got {x.shape} and {y.shape}")
    if len(np.unique(y)) < 2:
        raise ShapeError("probe needs at least two classes")
    if test_mask is None:
        test_mask = split_by_id_hash(np.arange(len(y)) if ids is None else ids)
    test_mask = np.asarray(test_mask, dtype=bool)
    xtr, ytr, xte, yte = x[~test_mask], y[~test_mask], x[test_mask], y[test_mask]
    if len(xtr) == 0 or len(xte) == 0:
        raise ShapeError("empty train or test split")
    mean, std = (xtr.mean(0), xtr.std(0) + 1e-6) if cfg.standardize else (None, None)
    probe = Probe(x.shape[1], int(y.max()) + 1, cfg, mean, std)
    opt = T.Adam(probe.parameters(), lr=cfg.lr, beta1=0.9, beta2=0.999)
    rng = np.random.default_rng([cfg.seed, 0x9B0])
    for _ in range(cfg.epochs):
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            opt.zero_grad()
            cross_entropy(probe.logits(xtr[b]), ytr[b]).backward()
            if cfg.weight_decay:
                for p in opt.params:
                    p.grad = p.grad + cfg.weight_decay * p.data
            opt.step()
    acc = float((probe.predict(xte) == yte).mean())
    return probe, acc


def probe_encoder(encoder, dataset, cfg: ProbeConfig, batch_size: int = 256) -> dict:
    """Extract features, fit a probe, and confirm the encoder was left untouched."""
    before = state_hash(encoder.state_dict())
    table = extract_features(encoder, dataset, batch_size)
    test_mask = table.is_test if table.is_test is not None else split_by_id_hash(table.ids)
    _, acc = train_probe(table.f1, table.labels, cfg, test_mask)
    after = state_hash(encoder.state_dict())
    if before != after:
        raise RuntimeError("encoder parameters changed during probe training")
    return {"kind": cfg.kind, "accuracy": acc, "n_train": int((~test_mask).sum()), "n_test": int(test_mask.sum()),
            "encoder_hash": after, "probe_config": asdict(cfg)}


# -- retrieval -------------------------------------------------------------

@dataclass
class RetrievalResult:
    query_id: int
    neighbor_ids: list
    similarities: list
    heatmaps: np.ndarray | None = None  # [k, 7, 7]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    sim = (a / np.where(na == 0, 1, na)) @ (b / np.where(nb == 0, 1, nb)).T
    return np.clip(sim, -1.0, 1.0)


def knn_retrieve(table: FeatureTable, query_id, k: int) -> RetrievalResult:
    q = table.row(query_id)
    if k < 0 or k >= len(table):
        raise ShapeError(f"k must be in [0, {len(table) - 1}], got {k}")
    sim = cosine_matrix(table.f1[q:q + 1], table.f1)[0]
    sim[q] = -np.inf
    order = np.argsort(-sim, kind="stable")[:k]
    heat = None
    if table.phi1 is not None and table.phi7 is not None:
        heat = np.einsum("d,ndij->nij", table.phi1[q], table.phi7[order])
    return RetrievalResult(int(table.ids[q]), [int(table.ids[i]) for i in order], [float(sim[i]) for i in order], heat)


# -- mixture maps ----------------------------------------------------------

def mixture_segmentation_map(encoder, head, x1, x2, nce_cfg: NCEConfig | None = None) -> np.ndarray:
    """Posterior over mixture components (inferred from x1) for each 7x7 position of x2: [B, 7, 7, k].

    With a single image there are no negatives, so the soft-clipped matching score
    stands in for the NCE log-softmax score.
    """
    cfg = nce_cfg or NCEConfig()
    was_training = encoder.training
    encoder.eval()
    try:
        with T.no_grad():
            fa, fb = encoder(x1), encoder(x2)
            B = fa.f1.shape[0]
            if B >= 2:
                pers, _, _ = _component_losses(fa, fb, (1, 7), cfg, head, encoder.phi1)
                s = np.stack([-p.data for p in pers], axis=-1)
            else:
                mix = mixture_features(T.reshape(fa.f1, (B, -1)), head)
                cons = T.reshape(T.transpose(fb.phi7, (0, 2, 3, 1)), (B, 49, -1))
                s = np.stack([soft_clip(matching_scores(encoder.phi1(T.index(mix, (slice(None), j))), cons).raw,
                                        cfg.clip).data[:, 0] for j in range(head.k)], axis=-1)
    finally:
        encoder.train(was_training)
    return mixture_posterior(s, head.tau).q.reshape(B, 7, 7, head.k)


def half_field_purity(encoder, q_map: np.ndarray, vertical: bool) -> float:
    """Agreement of argmax-q with the true half, up to relabeling, over 7x7 positions whose field is in one half."""
    size = encoder.config.input_size
    pred, truth = [], []
    for i in range(7):
        for j in range(7):
            t, l, b, r = encoder.receptive_field(7, i, j).rect
            lo, hi = (l, r) if vertical else (t, b)
            if hi < size // 2 or lo >= size // 2:
                truth.append(int(lo >= size // 2))
                pred.append(int(q_map[i, j].argmax()))
    pred, truth = np.array(pred), np.array(truth)
    return float(max(np.mean(pred == truth), np.mean(pred != truth)))

# -- synthetic mutual information check ------------------------------------

@dataclass
class MIValidation:
    rho: float
    dim: int
    estimate: float
    analytic: float
    ln_batch: float
    max_step_bound: float
    trace: list = field(default_factory=list)


def gaussian_mi(rho: float, dim: int = 1) -> float:
    return -0.5 * dim * math.log1p(-rho * rho) + 0.0  # + 0.0 turns -0.0 into 0.0


def synthetic_mi_validation(dim: int = 1, rho: float = 0.9, batch: int = 128, steps: int = 2000, seed: int = 0,
                            hidden: int = 64, embed: int = 16, lr: float = 3e-3, eval_batches: int = 50) -> MIValidation:
    """Train a two-tower critic with ``nce_loss`` on correlated Gaussians and report the bound.

    Each tower is Linear(dim, hidden) -> relu -> Linear(hidden, embed); the final
    estimate averages ``ln batch - loss`` over fresh batches after training.
    """
    if not -1 < rho < 1:
        raise ConfigError(f"correlation must lie strictly inside (-1, 1), got {rho}")
    if dim < 1 or batch < 2 or steps < 0:
        raise ConfigError("need dim >= 1, batch >= 2, steps >= 0")
    rng = np.random.default_rng(seed)
    towers = [[Linear(dim, hidden, rng=rng), Linear(hidden, embed, rng=rng, gain=1.0)] for _ in range(2)]
    params = [p for tower in towers for layer in tower for p in layer.parameters()]
    opt = T.Adam(params, lr=lr, beta1=0.9)
    noise = math.sqrt(1.0 - rho * rho)

    def sample():
        x = rng.standard_normal((batch, dim))
        return x, rho * x + noise * rng.standard_normal((batch, dim))

    def bound(x, y):
        ea = towers[0][1](T.relu(towers[0][0](Tensor(x))))
        eb = towers[1][1](T.relu(towers[1][0](Tensor(y))))
        loss, _ = nce_loss(matching_scores(ea, T.reshape(eb, (batch, 1, embed))))
        return loss

    trace = []
    for _ in range(steps):
        opt.zero_grad()
        loss = bound(*sample())
        loss.backward()
        opt.step()
        trace.append(mi_bound_estimate(loss.item(), batch))
    with T.no_grad():
        est = [mi_bound_estimate(bound(*sample()).item(), batch) for _ in range(eval_batches)]
    trace_max = max(trace + est)
    return MIValidation(rho, dim, float(np.mean(est)), gaussian_mi(rho, dim), math.log(batch), trace_max, trace)


# -- result files ----------------------------------------------------------

def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v)}")


def write_jsonl(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r, default=_jsonable, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_tsv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    lines = ["\t".join(cols)] + ["\t".join(str(r.get(c, "")) for c in cols) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_grid_image(path, grid: np.ndarray, levels: int | None = None) -> None:
    """Grayscale PGM (values rescaled to 0..255) plus the raw grid as ``.npy`` alongside.

    With ``levels`` set the grid holds integer labels in [0, levels) and is written
    as evenly spaced gray levels (an indexed image).
    """
    from PIL import Image

    grid = np.asarray(grid, dtype=np.float64)
    if levels is not None:
        img = np.rint(grid * (255.0 / max(levels - 1, 1)))
    else:
        lo, hi = grid.min(), grid.max()
        img = np.zeros_like(grid) if hi == lo else (grid - lo) * (255.0 / (hi - lo))
    path = Path(path)
    Image.fromarray(img.astype(np.uint8), mode="L").save(path.with_suffix(".pgm"))
    np.save(path.with_suffix(".npy"), grid)

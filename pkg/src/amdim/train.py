"""Run configuration, the training loop, checkpoints and the metrics stream."""
from __future__ import annotations

import dataclasses
import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import tensor as T
from .augment import AugmentPolicy, ImageBatch, make_views
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .encoder import EncoderConfig, build_encoder
from .errors import ConfigError, ShapeError, TrainingDiverged
from .mixtures import MixtureConfig, MixtureHead, mixture_nce_objective
from .nce import NCEConfig, multiscale_amdim_loss


@dataclass
class DataConfig:
    path: str = ""
    format: str = "synthetic"
    limit: int | None = None
    seed: int = 0  # synthetic generation and subset choice; independent of the run seed
    synthetic_n: int = 512


@dataclass
class OptimConfig:
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.02

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("bad optimizer settings")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("warmup_frac must be in [0, 1]")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    nce: NCEConfig = field(default_factory=NCEConfig)
    mixture: MixtureConfig | None = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 128  # n_a
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0  # master seed: overrides the encoder and augmentation seeds
    out_dir: str = "runs/desk"
    checkpoint_every: int = 500
    dtype: str = "float32"
    prefetch: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size (n_a) must be at least 2 so every positive has negatives, "
                              f"got {self.batch_size}")
        if self.epochs < 1 or (self.max_steps is not None and self.max_steps < 1):
            raise ConfigError("epochs and max_steps must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.augment.output_size != self.encoder.input_size:
            raise ConfigError(f"augment output_size {self.augment.output_size} must match encoder input_size "
                              f"{self.encoder.input_size}")
        self.encoder.seed = self.seed
        self.augment.seed = self.seed


_SECTIONS = {"data": DataConfig, "encoder": EncoderConfig, "augment": AugmentPolicy, "nce": NCEConfig,
             "mixture": MixtureConfig, "optim": OptimConfig}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            value = raw.pop(name)
            kw[name] = None if value is None else _build(cls, value, name)
    top = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw.update(raw)
    try:
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return run_config_from_dict(raw)


def run_config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["nce"]["scale_pairs"] = [list(p) for p in cfg.nce.scale_pairs]
    if cfg.mixture is not None:
        d["mixture"]["pair"] = list(cfg.mixture.pair)
    return json.loads(json.dumps(d))


# -- metrics ---------------------------------------------------------------

@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    losses: dict  # per scale pair
    penalty: float
    mi_bounds: dict
    candidates: dict
    lr: float
    wall_time: float
    entropy: float | None = None
    usage: list | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class MetricsWriter:
    """Append-only JSONL stream; records must arrive with increasing step numbers."""

    def __init__(self, path):
        self.path = Path(path)
        self.last_step = -1
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.last_step = json.loads(line)["step"]

    def write(self, rec: MetricsRecord) -> None:
        if rec.step <= self.last_step:
            raise ValueError(f"metrics step {rec.step} does not follow {self.last_step}")
        with open(self.path, "a") as fh:
            fh.write(rec.to_json() + "\n")
        self.last_step = rec.step


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize_metrics(path, tail: int = 50) -> dict:
    """First/last/tail-mean of the loss and per-pair MI bounds from a metrics stream."""
    recs = read_metrics(path)
    if not recs:
        raise ValueError(f"{path}: empty metrics stream")
    steps = [r["step"] for r in recs]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"{path}: step numbers are not increasing")
    last = recs[-tail:]
    out = {"steps": len(recs), "first_step": steps[0], "last_step": steps[-1],
           "loss_first": recs[0]["loss"], "loss_last": recs[-1]["loss"],
           "loss_tail_mean": float(np.mean([r["loss"] for r in last])),
           "wall_time": recs[-1]["wall_time"]}
    for label in recs[-1]["mi_bounds"]:
        out[f"mi_{label}_tail_mean"] = float(np.mean([r["mi_bounds"][label] for r in last]))
        out[f"lnK_{label}"] = math.log(recs[-1]["candidates"][label])
    if recs[-1].get("entropy") is not None:
        out["entropy_tail_mean"] = float(np.mean([r["entropy"] for r in last]))
    return out


# -- training --------------------------------------------------------------

def _prefetch(items, depth: int = 2):
    """Run a generator on a worker thread, at most ``depth`` items ahead of the consumer."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def work():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    steps: int
    final_loss: float


class Trainer:
    def __init__(self, cfg: RunConfig, dataset=None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        d = cfg.data
        self.dataset = dataset if dataset is not None else load_dataset(
            d.path, d.format, d.limit, d.seed, d.synthetic_n, cfg.encoder.input_size)
        is_test = self.dataset.is_test
        self.train_rows = np.flatnonzero(~is_test) if is_test is not None else np.arange(len(self.dataset))
        self.steps_per_epoch = len(self.train_rows) // cfg.batch_size
        if self.steps_per_epoch == 0:
            raise ConfigError(f"{len(self.train_rows)} training images cannot fill one batch of {cfg.batch_size}")
        self.total_steps = cfg.max_steps or cfg.epochs * self.steps_per_epoch
        self.warmup = max(1, math.ceil(cfg.optim.warmup_frac * self.total_steps))
        with T.default_dtype(self.dtype):
            self.encoder = build_encoder(cfg.encoder)
            mc = cfg.mixture
            self.head = None if mc is None else MixtureHead(
                self.encoder.channels[1], mc.k, mc.tau, np.random.default_rng([cfg.seed, 0x313]), mc.zero_init)
        params = self.encoder.parameters() + ([] if self.head is None else self.head.parameters())
        o = cfg.optim
        self.opt = T.Adam(params, o.lr, o.beta1, o.beta2, o.eps)
        self.step = 0
        self.out_dir = Path(cfg.out_dir)

    # schedule and batching
    def lr_at(self, step: int) -> float:
        return self.cfg.optim.lr * min(1.0, (step + 1) / self.warmup)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return self.train_rows[np.random.default_rng([self.cfg.seed, epoch, 0xDA7A]).permutation(len(self.train_rows))]

    def batch_rows(self, step: int) -> tuple[int, np.ndarray]:
        epoch, b = divmod(step, self.steps_per_epoch)
        bs = self.cfg.batch_size
        return epoch, self.epoch_order(epoch)[b * bs:(b + 1) * bs]

    def views(self, step: int):
        epoch, rows = self.batch_rows(step)
        batch = ImageBatch(self.dataset.images(rows), self.dataset.ids[rows])
        x1, x2 = make_views(batch, self.cfg.augment, epoch)
        return step, epoch, x1, x2

    # one update
    def loss(self, x1, x2, step: int):
        f1, f2 = self.encoder(x1), self.encoder(x2)
        rng = np.random.default_rng([self.cfg.seed, step, 0x5CA1])
        if self.head is None:
            return multiscale_amdim_loss(f1, f2, self.cfg.nce, rng)
        return mixture_nce_objective(f1, f2, self.head, self.cfg.nce, self.encoder.phi1, rng, self.cfg.mixture.pair)

    def train_step(self, step: int, epoch: int, x1: ImageBatch, x2: ImageBatch, t0: float) -> MetricsRecord:
        self.opt.zero_grad()
        try:
            loss, diag = self.loss(x1, x2, step)
        except ShapeError as exc:
            raise self._diverged(step, epoch, x1, str(exc), None) from exc
        if not np.isfinite(loss.item()):
            raise self._diverged(step, epoch, x1, "non-finite loss", diag)
        loss.backward()
        lr = self.lr_at(step)
        self.opt.step(lr)
        self.step = step + 1
        ent = [v["entropy"] for v in diag.values() if "entropy" in v]
        usage = [v["usage"] for v in diag.values() if "usage" in v]
        return MetricsRecord(
            step=step, epoch=epoch, loss=loss.item(),
            losses={k: v["loss"] for k, v in diag.items()},
            penalty=float(sum(v["penalty"] for v in diag.values())),
            mi_bounds={k: v["mi_bound"] for k, v in diag.items()},
            candidates={k: v["K"] for k, v in diag.items()},
            lr=lr, wall_time=time.perf_counter() - t0,
            entropy=float(np.mean(ent)) if ent else None, usage=usage[0] if usage else None)

    def _diverged(self, step, epoch, x1, reason, diag):
        dump = {"step": step, "epoch": epoch, "reason": reason, "batch_ids": x1.ids.tolist(),
                "scores": None if diag is None else {k: v["scores"] for k, v in diag.items()}}
        with T.no_grad():
            feats = self.encoder(x1)
        dump["features"] = {name: {"mean": float(np.nanmean(t.data)) if np.any(np.isfinite(t.data)) else None,
                                   "nonfinite": int((~np.isfinite(t.data)).sum())}
                            for name, t in (("phi1", feats.phi1), ("phi5", feats.phi5), ("phi7", feats.phi7))}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"diverged_step{step}.json"
        path.write_text(json.dumps(dump, indent=1))
        dump["path"] = str(path)
        return TrainingDiverged(f"training diverged at step {step} ({reason}); dump written to {path}", dump)

    # persistence
    def save(self, path) -> Path:
        tensors = {f"encoder.{n}": a for n, a in self.encoder.state_dict().items()}
        if self.head is not None:
            tensors.update({f"head.{n}": a for n, a in self.head.state_dict().items()})
        for i, (m, v) in enumerate(zip(self.opt.state["m"], self.opt.state["v"])):
            tensors[f"adam.m.{i}"] = m
            tensors[f"adam.v.{i}"] = v
        meta = {"step": self.step, "adam_t": self.opt.state["t"], "total_steps": self.total_steps}
        save_checkpoint(path, tensors, {"run": run_config_dict(self.cfg)}, meta)
        return Path(path)

    def restore(self, path) -> None:
        tensors, _, meta = load_checkpoint(path)
        self.encoder.load_state_dict({n[8:]: a for n, a in tensors.items() if n.startswith("encoder.")})
        if self.head is not None:
            self.head.load_state_dict({n[5:]: a for n, a in tensors.items() if n.startswith("head.")})
        n = len(self.opt.params)
        self.opt.state = {"t": meta["adam_t"], "m": [tensors[f"adam.m.{i}"].copy() for i in range(n)],
                          "v": [tensors[f"adam.v.{i}"].copy() for i in range(n)]}
        self.step = meta["step"]

    @classmethod
    def from_checkpoint(cls, path, dataset=None, **overrides) -> "Trainer":
        _, config, _ = load_checkpoint(path)
        raw = config["run"]
        raw.update(overrides)
        trainer = cls(run_config_from_dict(raw), dataset)
        trainer.restore(path)
        return trainer

    def run(self, stop_at: int | None = None, metrics_path=None, log=None) -> TrainResult:
        """Train from ``self.step`` to ``stop_at`` (default: the configured total), checkpointing on cadence."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        end = min(stop_at or self.total_steps, self.total_steps)
        writer = MetricsWriter(metrics_path or self.out_dir / "metrics.jsonl")
        producer = (self.views(s) for s in range(self.step, end))
        batches = _prefetch(producer) if self.cfg.prefetch else producer
        t0, rec = time.perf_counter(), None
        for step, epoch, x1, x2 in batches:
            rec = self.train_step(step, epoch, x1, x2, t0)
            writer.write(rec)
            if log is not None:
                log(rec)
            if self.step % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"step{self.step:07d}.ckpt")
        final = self.save(self.out_dir / "last.ckpt")
        return TrainResult(final, writer.path, self.step, float("nan") if rec is None else rec.loss)


def train(cfg: RunConfig, dataset=None, log=None) -> TrainResult:
    return Trainer(cfg, dataset).run(log=log)


def strip_wall_time(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)

"""Paired desk experiment: linear probe before and after training, per seed."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass
from pathlib import Path

from .data import load_dataset
from .errors import IngestionError
from .evaluation import ProbeConfig, probe_encoder, write_jsonl
from .train import Trainer, load_run_config

DEFAULT_CIFAR_DIR = "~/data/cifar-10-batches-bin"
DESK_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "desk.yaml"


def cifar_dir() -> Path:
    """CIFAR-10 binary folder from $AMDIM_CIFAR10_DIR or the default location."""
    path = Path(os.path.expanduser(os.environ.get("AMDIM_CIFAR10_DIR", DEFAULT_CIFAR_DIR)))
    if not (path / "data_batch_1.bin").is_file():
        raise IngestionError(f"{path}: CIFAR-10 binary batches not found (set AMDIM_CIFAR10_DIR)")
    return path


@dataclass
class PairedResult:
    seed: int
    random_init: float
    trained: float
    steps: int
    seconds: float

    @property
    def gain(self) -> float:
        return self.trained - self.random_init


def paired_run(config=DESK_CONFIG, seed: int = 0, out_dir=None, data_path=None, probe: ProbeConfig | None = None,
               log=None) -> PairedResult:
    """Probe the frozen random-init encoder, train it, then probe again with the same probe settings."""
    overrides = {"seed": seed, "out_dir": str(out_dir) if out_dir else None}
    cfg = load_run_config(config, overrides)
    if data_path is not None:
        cfg.data.path = str(data_path)
    d = cfg.data
    dataset = load_dataset(d.path, d.format, d.limit, d.seed, d.synthetic_n, cfg.encoder.input_size)
    trainer = Trainer(cfg, dataset)
    probe = probe or ProbeConfig(kind="linear", seed=seed)
    t0 = time.time()
    before = probe_encoder(trainer.encoder, dataset, probe)["accuracy"]
    result = trainer.run(log=log)
    after = probe_encoder(trainer.encoder, dataset, probe)["accuracy"]
    return PairedResult(seed, before, after, result.steps, time.time() - t0)


def desk_experiment(seeds=(0, 1, 2), config=DESK_CONFIG, out_root="runs/desk", data_path=None, log=None):
    results = []
    for seed in seeds:
        r = paired_run(config, seed, Path(out_root) / f"seed{seed}", data_path, log=log)
        results.append(r)
        write_jsonl(Path(out_root) / "paired.jsonl",
                    [{"seed": r.seed, "random_init": r.random_init, "trained": r.trained, "gain": r.gain,
                      "steps": r.steps, "seconds": r.seconds}], append=True)
    return results

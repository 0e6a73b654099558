"""Command line front end.

    amdim [--seed N] [--out DIR] train    --config FILE [--steps N] [--resume CKPT]
    amdim [--seed N] [--out DIR] probe    --checkpoint FILE --kind linear|mlp
    amdim [--seed N] [--out DIR] retrieve --checkpoint FILE --query ID --k N
    amdim [--seed N] [--out DIR] mi-check --rho F --dim N
    amdim [--seed N] [--out DIR] rf-audit --config FILE

Exit status: 0 success, 1 invalid input or usage, 2 failure while running.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .data import load_dataset
from .encoder import Encoder, EncoderConfig
from .errors import ConfigError, IngestionError, ShapeError, TrainingDiverged
from .evaluation import (ProbeConfig, extract_features, knn_retrieve, probe_encoder, synthetic_mi_validation,
                         write_grid_image, write_jsonl, write_tsv)
from .train import Trainer, load_run_config, summarize_metrics

log = logging.getLogger("amdim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    p.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amdim", description="Multiscale infomax training and evaluation.")
    _global_flags(parser, False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train an encoder from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, help="stop after this many total steps")
    p.add_argument("--resume", help="continue from a training checkpoint")

    p = sub.add_parser("probe", help="linear or MLP probe on frozen f1 features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("linear", "mlp"), default="linear")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--data", help="dataset path (default: the one the checkpoint was trained on)")
    p.add_argument("--format", choices=("cifar10-binary", "image-directory", "synthetic"))

    p = sub.add_parser("retrieve", help="cosine nearest neighbours of one image by f1")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--data")
    p.add_argument("--format", choices=("cifar10-binary", "image-directory", "synthetic"))

    p = sub.add_parser("mi-check", help="NCE bound against closed-form Gaussian mutual information")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=128)

    p = sub.add_parser("rf-audit", help="receptive-field table and overlap matrix")
    p.add_argument("--config", required=True)

    for p in sub.choices.values():
        _global_flags(p, True)
    return parser


# -- helpers ---------------------------------------------------------------

def _out_dir(args, default) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")


def load_any_encoder(path):
    """Encoder plus the run config (if any) from a training or encoder-only checkpoint."""
    _require_file(path, "checkpoint")
    tensors, config, meta = load_checkpoint(path)
    if "run" in config:
        enc_cfg = dict(config["run"]["encoder"])
    elif "encoder" in config:
        enc_cfg = dict(config["encoder"])
    else:
        raise CheckpointError(f"{path}: no encoder configuration stored")
    state = {n[len("encoder."):]: a for n, a in tensors.items() if n.startswith("encoder.")}
    with T.default_dtype(next(iter(state.values())).dtype):
        enc = Encoder(EncoderConfig(**enc_cfg))
    enc.load_state_dict(state)
    return enc, config.get("run"), meta


def _dataset_for(args, run):
    if args.data or args.format:
        fmt = args.format or "cifar10-binary"
        return load_dataset(args.data or "", fmt, seed=args.seed or 0)
    if run is None:
        raise ConfigError("checkpoint carries no dataset; pass --data and --format")
    d = run["data"]
    return load_dataset(d["path"], d["format"], d["limit"], d["seed"], d["synthetic_n"], run["encoder"]["input_size"])


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "out_dir": args.out}
    if args.resume:
        _require_file(args.resume, "checkpoint")
        trainer = Trainer.from_checkpoint(args.resume, **{k: v for k, v in overrides.items() if v is not None})
    else:
        trainer = Trainer(load_run_config(args.config, overrides))
    cfg = trainer.cfg
    log.info("training %d steps (%d per epoch), n_a=%d, %s", trainer.total_steps, trainer.steps_per_epoch,
             cfg.batch_size, cfg.dtype)

    def progress(rec):
        if rec.step % 10 == 0 or rec.step + 1 == trainer.total_steps:
            mi = " ".join(f"{k}:{v:.3f}" for k, v in rec.mi_bounds.items())
            log.info("step %d epoch %d loss %.4f mi[%s] lr %.2e %.1fs", rec.step, rec.epoch, rec.loss, mi, rec.lr,
                     rec.wall_time)

    result = trainer.run(stop_at=args.steps, log=progress)
    summary = summarize_metrics(result.metrics)
    write_tsv(Path(cfg.out_dir) / "summary.tsv", [summary])
    print(f"checkpoint {result.checkpoint}")
    print(f"metrics {result.metrics}")
    print(f"final loss {result.final_loss:.6f} after {result.steps} steps")
    return 0


def cmd_probe(args) -> int:
    enc, run, _ = load_any_encoder(args.checkpoint)
    ds = _dataset_for(args, run)
    cfg = ProbeConfig(kind=args.kind, hidden=args.hidden, epochs=args.epochs, lr=args.lr, seed=args.seed or 0)
    res = probe_encoder(enc, ds, cfg)
    out = _out_dir(args, Path(args.checkpoint).parent)
    recs = [{"metric": "accuracy", "value": res["accuracy"], "kind": cfg.kind},
            {"metric": "n_train", "value": res["n_train"]}, {"metric": "n_test", "value": res["n_test"]},
            {"metric": "encoder_hash", "value": res["encoder_hash"]}]
    write_jsonl(out / f"probe_{cfg.kind}.jsonl", recs)
    write_tsv(out / f"probe_{cfg.kind}.tsv", [{"kind": cfg.kind, "accuracy": res["accuracy"],
                                               "n_train": res["n_train"], "n_test": res["n_test"]}])
    print(f"{cfg.kind} probe accuracy {res['accuracy']:.4f} ({res['n_train']} train / {res['n_test']} test)")
    return 0


def cmd_retrieve(args) -> int:
    enc, run, _ = load_any_encoder(args.checkpoint)
    ds = _dataset_for(args, run)
    table = extract_features(enc, ds, maps=True)
    res = knn_retrieve(table, args.query, args.k)
    out = _out_dir(args, Path(args.checkpoint).parent / f"retrieve_{args.query}")
    write_jsonl(out / "neighbors.jsonl", [{"rank": r, "id": i, "cosine": s}
                                          for r, (i, s) in enumerate(zip(res.neighbor_ids, res.similarities))])
    for r, i in enumerate(res.neighbor_ids):
        write_grid_image(out / f"heatmap_{r}_{i}", res.heatmaps[r])
    print(f"query {res.query_id}")
    for r, (i, s) in enumerate(zip(res.neighbor_ids, res.similarities)):
        print(f"{r}\t{i}\t{s:.4f}")
    return 0


def cmd_mi_check(args) -> int:
    r = synthetic_mi_validation(dim=args.dim, rho=args.rho, batch=args.batch, steps=args.steps, seed=args.seed or 0)
    print(f"analytic MI {r.analytic:.4f} nats")
    print(f"NCE estimate {r.estimate:.4f} nats (ln batch {r.ln_batch:.4f}, max step bound {r.max_step_bound:.4f})")
    if args.out:
        write_jsonl(_out_dir(args, args.out) / "mi_check.jsonl",
                    [{"metric": "analytic", "value": r.analytic}, {"metric": "estimate", "value": r.estimate},
                     {"metric": "ln_batch", "value": r.ln_batch}, {"metric": "rho", "value": r.rho},
                     {"metric": "dim", "value": r.dim}])
    return 0


def cmd_rf_audit(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    with T.default_dtype(np.float32):
        enc = Encoder(cfg.encoder)
    rows = enc.layer_table()
    cols = ["block", "kernel", "stride", "in_extent", "out_extent", "channels", "rf_size", "rf_jump", "tap"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(str(r[c]) for c in cols))
    for d in (7, 5):
        mid = d // 2
        print(f"\noverlap (IoU) of fields along row {mid} at d={d}")
        mat = [[enc.rf_overlap(d, (mid, a), (mid, b)) for b in range(d)] for a in range(d)]
        for a, line in enumerate(mat):
            print(f"{a}\t" + "\t".join(f"{v:.3f}" for v in line))
    print(f"\nd=1 field {enc.receptive_field(1, 0, 0).rect}")
    if args.out:
        write_tsv(_out_dir(args, args.out) / "rf_table.tsv", rows)
    return 0


COMMANDS = {"train": cmd_train, "probe": cmd_probe, "retrieve": cmd_retrieve, "mi-check": cmd_mi_check,
            "rf-audit": cmd_rf_audit}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    for name in ("seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, IngestionError, CheckpointError, OSError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Small-scale stand-in for the desk experiment on generated shape scenes.

Trains a narrow encoder on synthetic images and compares a linear probe on
held-out scenes before and after training. This is a sanity check of the
pipeline on one CPU, not a substitute for the CIFAR-10 run in desk_run.py.

    python scripts/synthetic_proxy.py --steps 1500 --out runs/proxy
"""
import argparse
import json
import shutil
import time
from pathlib import Path

from amdim.data import synthetic_scenes
from amdim.evaluation import ProbeConfig, probe_encoder
from amdim.train import Trainer, run_config_from_dict


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--ndf", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--probe-epochs", type=int, default=200)
    ap.add_argument("--out", default="runs/proxy")
    args = ap.parse_args()

    out = Path(args.out)
    shutil.rmtree(out, ignore_errors=True)
    cfg = run_config_from_dict(dict(
        data=dict(format="synthetic", synthetic_n=2048), encoder=dict(ndf=args.ndf, nrkhs=4 * args.ndf, ndepth=1),
        batch_size=32, epochs=100, max_steps=args.steps, seed=args.seed, dtype="float32", out_dir=str(out),
        checkpoint_every=10 ** 6, optim=dict(lr=1e-3)))
    trainer = Trainer(cfg)
    held_out = synthetic_scenes(1024, seed=77)
    pc = ProbeConfig(epochs=args.probe_epochs, seed=args.seed)

    before = probe_encoder(trainer.encoder, held_out, pc)["accuracy"]
    print(f"random init probe {before:.4f}", flush=True)
    t0 = time.time()
    trainer.run(log=lambda r: print(r.step, f"{r.loss:.3f}", flush=True) if r.step % 250 == 0 else None)
    after = probe_encoder(trainer.encoder, held_out, pc)["accuracy"]
    print(f"trained probe {after:.4f} ({time.time() - t0:.0f}s training)")
    (out / "proxy.json").write_text(json.dumps({"steps": args.steps, "seed": args.seed,
                                                "random_init": before, "trained": after}))


if __name__ == "__main__":
    main()

"""Time a few training steps of the desk recipe on synthetic images.

Gives a wall-clock estimate for the full desk run on the current machine
without needing the CIFAR-10 files.

    python scripts/desk_step_cost.py --steps 3
"""
import argparse
import tempfile

from amdim.desk import DESK_CONFIG
from amdim.train import Trainer, load_run_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(DESK_CONFIG))
    ap.add_argument("--steps", type=int, default=3)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as out:
        cfg = load_run_config(args.config, {"out_dir": out})
        train_images, seeds = cfg.data.limit or 10_000, 3
        cfg.data.format, cfg.data.synthetic_n = "synthetic", 2 * cfg.batch_size
        trainer = Trainer(cfg)
        times = []
        trainer.run(stop_at=args.steps + 1, log=lambda r: times.append(r.wall_time))
    per_step = (times[-1] - times[0]) / (len(times) - 1)  # first step excluded as warm-up
    steps = cfg.epochs * (train_images // cfg.batch_size)
    print(f"{per_step:.2f} s/step; {steps} steps per seed -> {steps * per_step / 3600:.1f} h per seed, "
          f"{seeds * steps * per_step / 3600:.1f} h for {seeds} seeds (probes excluded)")


if __name__ == "__main__":
    main()

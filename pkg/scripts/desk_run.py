"""Paired desk experiment on a 10k CIFAR-10 subset over three seeds.

For each seed a linear probe is fit on the frozen random-init encoder, the
encoder is trained with configs/desk.yaml, and the same probe is fit again.

    AMDIM_CIFAR10_DIR=~/data/cifar-10-batches-bin python scripts/desk_run.py --out runs/desk
"""
import argparse
import logging

from amdim.desk import DESK_CONFIG, cifar_dir, desk_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(DESK_CONFIG))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    def progress(rec):
        if rec.step % 50 == 0:
            logging.info("step %d loss %.4f %.0fs", rec.step, rec.loss, rec.wall_time)

    results = desk_experiment(args.seeds, args.config, args.out, cifar_dir(), log=progress)
    for r in results:
        print(f"seed {r.seed}\trandom {r.random_init:.4f}\ttrained {r.trained:.4f}\tgain {r.gain:+.4f}\t{r.seconds:.0f}s")


if __name__ == "__main__":
    main()

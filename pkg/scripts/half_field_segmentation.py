"""Mixture segmentation of two-color half-field scenes.

Trains a narrow encoder with a k=2 mixture head on random half-field images,
then writes the argmax-q map over the 7x7 grid for a few held-out scenes.

    python scripts/half_field_segmentation.py --steps 400 --out runs/halves
"""
import argparse
import shutil
from pathlib import Path

import numpy as np

from amdim.data import half_field_dataset, half_field_scene
from amdim.evaluation import half_field_purity, mixture_segmentation_map, write_grid_image, write_tsv
from amdim.train import Trainer, run_config_from_dict


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--tau", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/halves")
    args = ap.parse_args()

    out = Path(args.out)
    shutil.rmtree(out, ignore_errors=True)
    cfg = run_config_from_dict(dict(
        encoder=dict(ndf=16, nrkhs=64, ndepth=1), mixture=dict(k=2, tau=args.tau), batch_size=32, epochs=100,
        max_steps=args.steps, seed=args.seed, dtype="float32", out_dir=str(out), checkpoint_every=10 ** 6,
        optim=dict(lr=1e-3)))
    trainer = Trainer(cfg, half_field_dataset(512, seed=args.seed))
    trainer.run()

    scenes, vertical = [], []
    for v in (True, False):
        for k in range(5):
            scenes.append(half_field_scene(colors=np.random.default_rng(100 + k).uniform(size=(2, 3)), vertical=v))
            vertical.append(v)
    x = np.stack(scenes)
    q = mixture_segmentation_map(trainer.encoder, trainer.head, x, x)
    rows = []
    for n, (qn, v) in enumerate(zip(q, vertical)):
        purity = half_field_purity(trainer.encoder, qn, v)
        write_grid_image(out / f"segmentation_{n}", qn.argmax(-1), levels=2)
        rows.append({"scene": n, "vertical": v, "purity": purity})
        print(f"scene {n} {'vertical' if v else 'horizontal'} purity {purity:.2f}")
    write_tsv(out / "purity.tsv", rows)
    print(f"mean purity {np.mean([r['purity'] for r in rows]):.3f}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Desk-scale segmentation run: train on synthetic scenes, print a per-epoch accuracy table.

Usage: python scripts/run_segmentation_experiment.py --train 200 --holdout 50 --epochs 20 --out runs/seg
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from uncd import synthdata as sd
from uncd.checkpoint import save_checkpoint
from uncd.parallel import threads
from uncd.trainer import Dataset, TrainConfig, train
from uncd.unet import UNetConfig, init_model


def build_sets(n_train, n_holdout, size, seed):
    scenes = [sd.generate_scene(seed * 100_003 + i, size) for i in range(n_train + n_holdout)]
    train_scenes, hold_scenes = scenes[:n_train], scenes[n_train:]
    stats = sd.compute_stats(s.image for s in train_scenes)

    def pack(items):
        return Dataset(sd.normalize(np.stack([s.image for s in items]), stats), np.stack([s.mask for s in items]))

    return pack(train_scenes), pack(hold_scenes), stats


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--holdout", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--base-channels", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/seg")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, holdout, stats = build_sets(args.train, args.holdout, args.size, args.seed)
    model = init_model(UNetConfig(input_size=args.size, base_channels=args.base_channels), args.seed)
    model.stats = stats
    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed)
    t0 = time.perf_counter()
    with threads():
        result = train(model, train_set, config, holdout, checkpoint_dir=out)
    elapsed = time.perf_counter() - t0

    h = result.history
    print(f"{'epoch':>5}  {'loss':>7}  {'pcc2':>6}  {'bldg':>6}  {'immut':>6}  {'bgnd':>6}")
    for i, ep in enumerate(h["epoch"]):
        print(
            f"{int(ep):5d}  {h['train_loss'][i]:7.4f}  {h['holdout_pcc2'][i]:6.4f}  "
            f"{h['holdout_pcc2_class0'][i]:6.4f}  {h['holdout_pcc2_class1'][i]:6.4f}  {h['holdout_pcc2_class2'][i]:6.4f}"
        )
    print(f"best epoch {result.best_epoch}, {elapsed / 60:.1f} min")
    (out / "history.json").write_text(json.dumps({"elapsed_s": elapsed, "best_epoch": result.best_epoch, **h}, indent=2))
    save_checkpoint(result.best, out / "model.uncd")


if __name__ == "__main__":
    main()

"""Desk-scale experiments: probe gain over a random encoder and the
cross-strategy PSNR table. Used by the acceptance suite and runnable as
``python -m mms.experiments {probe,table} OUT_DIR``."""

import argparse
import json
import os
import sys
import time

from .evaluation import ProbeConfig, build_eval_sets, probe_train_eval, score_eval_sets, table_pattern
from .masking import STRATEGIES
from .model import init_params
from .rng import derive_seed
from .synth import PROBE_LAYOUT, make_dataset, probe_config
from .train import load_params, make_config, train_loop

SINGLE = {"random": "random", "block": "block", "span": "span"}


def pretrain_synthetic(out_dir, n_images=5000, epochs=3, strategies=STRATEGIES, seed=0,
                       precision="float32", batch_size=32, warmup_steps=200, data_seed=1):
    """Pre-train on freshly rendered words; returns the final checkpoint path."""
    final = os.path.join(out_dir, "final.mms")
    samples, _ = make_dataset(n_images, seed=data_seed)
    cfg = make_config(epochs=epochs, strategies=",".join(strategies), seed=seed, precision=precision,
                      batch_size=batch_size, warmup_steps=warmup_steps)
    t0 = time.perf_counter()
    train_loop(cfg, [s.image for s in samples], out_dir=out_dir)
    with open(os.path.join(out_dir, "wall_time.txt"), "w") as fh:
        fh.write(f"{time.perf_counter() - t0:.1f}\n")
    return final


def probe_gain(ckpt, preset="tiny-desk", init_seed=0, n_train=2000, n_test=1000, seed=7, cfg=None):
    """Column-probe test accuracy of a checkpoint and of a random-init encoder.

    The random encoder is the same initialisation the trainer starts from.
    """
    cfg = cfg or ProbeConfig(seed=seed)
    synth = probe_config()
    train, _ = make_dataset(n_train, synth, derive_seed(seed, "probe-train"), PROBE_LAYOUT)
    test, _ = make_dataset(n_test, synth, derive_seed(seed, "probe-test"), PROBE_LAYOUT)
    trained = probe_train_eval(load_params(ckpt), train, test, cfg)
    scratch = probe_train_eval(init_params(preset, derive_seed(init_seed, "params")), train, test, cfg)
    return {"pretrained": trained.test_accuracy, "scratch": scratch.test_accuracy,
            "pretrained_char": trained.test_char_accuracy, "scratch_char": scratch.test_char_accuracy,
            "pretrained_train": trained.train_accuracy, "scratch_train": scratch.train_accuracy,
            "gain_pp": 100.0 * (trained.test_accuracy - scratch.test_accuracy)}


def psnr_table(ckpts, n_eval=500, seed=11):
    """Score every checkpoint on the three frozen eval sets of held-out words."""
    samples, _ = make_dataset(n_eval, seed=derive_seed(seed, "eval-images"))
    images = [s.image for s in samples]
    sets = build_eval_sets(len(images), seed)
    rows = {name: score_eval_sets(load_params(path), images, sets) for name, path in ckpts.items()}
    return rows, table_pattern(rows, SINGLE)


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m mms.experiments")
    p.add_argument("which", choices=("probe", "table"))
    p.add_argument("out")
    p.add_argument("--n-images", type=int, default=5000)
    p.add_argument("--epochs", type=int, default=3)
    args = p.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    mms_dir = os.path.join(args.out, "mms")
    ckpt = os.path.join(mms_dir, "final.mms")
    if not os.path.exists(ckpt):
        pretrain_synthetic(mms_dir, args.n_images, args.epochs)
    if args.which == "probe":
        result = probe_gain(ckpt)
    else:
        ckpts = {"mms": ckpt}
        for s in STRATEGIES:
            d = os.path.join(args.out, s)
            if not os.path.exists(os.path.join(d, "final.mms")):
                pretrain_synthetic(d, args.n_images, args.epochs, strategies=(s,))
            ckpts[s] = os.path.join(d, "final.mms")
        rows, pattern = psnr_table(ckpts)
        result = {"psnr": rows, "pattern": pattern}
    json.dump(result, sys.stdout, indent=2)
    print()


if __name__ == "__main__":
    main()

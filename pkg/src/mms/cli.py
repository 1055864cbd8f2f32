"""Command-line entry point: ``mms {synth,mask,pretrain,eval,attn,probe}``.

Exit codes: 0 success, 2 bad flags or inputs (one-line reason on stderr),
1 runtime failure. Every output directory receives ``run_manifest.json``,
written before work starts and completed with an end timestamp.
"""

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import VERSION as CKPT_VERSION
from .errors import ConfigError, LayoutError, MMSError
from .evaluation import (EvalReport, ProbeConfig, build_eval_sets, compose_reconstruction,
                         coverage_histogram, eval_sets_from_json, eval_sets_to_json, probe_train_eval,
                         psnr_table_csv, reconstruct, score_eval_sets)
from .imageio import read_pnm, write_pnm
from .masking import DEFAULT_RATIOS, STRATEGIES, BlockConfig, SpanConfig, apply_mask, usable_mask
from .model import attention_char, attention_cls, attention_patch, init_params
from .patches import ImageBuf, depatchify, patchify, prepare_image
from .rng import derive_seed
from .synth import (PROBE_COLORS, PROBE_LAYOUT, SynthConfig, load_dataset, load_images, make_dataset,
                    probe_config, render_word, write_dataset)
from .train import load_config_file, load_params, make_config, train_loop

MANIFEST = "run_manifest.json"
DEMO_WORD = "MASKING"


class UsageError(Exception):
    """Bad flag combination or missing input; maps to exit code 2."""


# run manifest ------------------------------------------------------------------

def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def hash_path(path):
    """SHA-256 of a file, or of a directory's files in sorted order."""
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


class RunManifest:
    def __init__(self, out_dir, command, config, seeds, inputs):
        self.path = os.path.join(out_dir, MANIFEST)
        self.data = {
            "command": command,
            "config": config,
            "seeds": seeds,
            "inputs": {name: {"path": p, "sha256": hash_path(p)} for name, p in inputs.items() if p},
            "tool_version": __version__,
            "checkpoint_format_version": CKPT_VERSION,
            "started": _now(),
            "finished": None,
        }
        os.makedirs(out_dir, exist_ok=True)
        self._write()

    def _write(self):
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, **extra):
        self.data.update(extra)
        self.data["finished"] = _now()
        self._write()


# helpers -----------------------------------------------------------------------

def _need_file(path, what):
    if path is None or not os.path.isfile(path):
        raise UsageError(f"{what} {path!r} does not exist")
    return path


def _need_dir(path, what):
    if path is None or not os.path.isdir(path):
        raise UsageError(f"{what} {path!r} is not a directory")
    return path


def _check_ratio(r):
    if r is not None and not 0.0 < r <= 1.0:
        raise UsageError(f"--ratio must lie in (0, 1], got {r}")


def _demo_sample(seed):
    return render_word(DEMO_WORD, seed=seed, scale=3, gap=3, origin=(5, 3))


def _strip(images):
    """Stack images vertically into one preview."""
    return ImageBuf(np.concatenate([img.to_rgb().data for img in images], axis=0))


def _parse_ckpts(values):
    out = {}
    for v in values:
        name, sep, path = v.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(v))[0], v
        if name in out:
            raise UsageError(f"duplicate checkpoint name {name!r}")
        out[name] = _need_file(path, "checkpoint")
    return out


def _synth_config(args):
    try:
        return SynthConfig(min_len=args.min_len, max_len=args.max_len,
                           noise_std=args.noise_std, min_contrast=args.min_contrast).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# subcommands -------------------------------------------------------------------

def cmd_synth(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = _synth_config(args)
    layout = PROBE_LAYOUT if args.probe_layout else None
    if args.probe_layout:
        cfg = probe_config(cfg)
    man = RunManifest(args.out, "synth", {**dataclasses.asdict(cfg), "n": args.n, "layout": layout},
                      {"seed": args.seed}, {})
    samples, _ = make_dataset(args.n, cfg, args.seed, layout)
    write_dataset(args.out, samples)
    man.finish(outputs=["manifest.jsonl"] + [f"sample_{i:05d}.ppm" for i in range(args.n)])


def cmd_mask(args):
    if args.demo == (args.image is not None):
        raise UsageError("give exactly one of --image or --demo")
    _check_ratio(args.ratio)
    if args.span_max < 1:
        raise UsageError("--span-max must be >= 1")
    if args.image:
        _need_file(args.image, "image")
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    ratios = {s: args.ratio if args.ratio is not None else DEFAULT_RATIOS[s] for s in strategies}
    config = {"strategy": args.strategy, "ratios": ratios, "span_max": args.span_max,
              "source": "demo:" + DEMO_WORD if args.demo else "image"}
    man = RunManifest(args.out, "mask", config, {"seed": args.seed}, {"image": args.image})
    img = prepare_image(read_pnm(args.image)) if args.image else _demo_sample(args.seed).image
    grid = patchify(img)
    previews, masks = [img], {}
    for s in strategies:
        m = usable_mask(s, grid.grid_h, grid.grid_w, ratios[s], derive_seed(args.seed, "mask", s),
                        SpanConfig(ratios[s], args.span_max), BlockConfig(ratios[s]))
        masks[s] = m.to_dict()
        previews.append(apply_mask(img, m, grid.patch_size, fill=0.5))
    write_pnm(os.path.join(args.out, "preview.ppm"), _strip(previews))
    with open(os.path.join(args.out, "masks.json"), "w", encoding="utf-8") as fh:
        json.dump(masks, fh, indent=2, sort_keys=True)
        fh.write("\n")
    man.finish(outputs=["preview.ppm", "masks.json"])


_PRETRAIN_FLAGS = ("preset", "epochs", "seed", "batch_size", "warmup_steps", "total_steps",
                   "base_lr", "precision", "strategies", "checkpoint_every")


def resolve_pretrain_config(args):
    """Defaults, then the config file, then explicit flags."""
    merged = dict(load_config_file(args.config)) if args.config else {}
    merged.update({k: getattr(args, k) for k in _PRETRAIN_FLAGS if getattr(args, k) is not None})
    return make_config(**merged)


def cmd_pretrain(args):
    _need_dir(args.data, "--data")
    if args.config:
        _need_file(args.config, "--config")
    if args.resume:
        _need_file(args.resume, "--resume")
    cfg = resolve_pretrain_config(args)
    images = load_images(args.data)
    resolved = cfg.resolved(len(images))
    man = RunManifest(args.out, "pretrain", resolved.to_dict(), {"seed": cfg.seed},
                      {"data": args.data, "config": args.config, "resume": args.resume})
    _, _, history = train_loop(cfg, images, out_dir=args.out, resume=args.resume)
    man.finish(steps=len(history), final_loss=history[-1][3] if history else None,
               outputs=["metrics.csv", "timing.csv", "final.mms"])


def cmd_eval(args):
    ckpts = _parse_ckpts(args.ckpt)
    _need_dir(args.data, "--data")
    if args.eval_sets:
        _need_file(args.eval_sets, "--eval-sets")
    if args.n_strips < 0:
        raise UsageError("--n-strips must be >= 0")
    man = RunManifest(args.out, "eval", {"checkpoints": ckpts, "n_strips": args.n_strips,
                                         "eval_sets": args.eval_sets},
                      {"seed": args.seed}, {"data": args.data, "eval_sets": args.eval_sets, **ckpts})
    images = load_images(args.data)
    if args.eval_sets:
        with open(args.eval_sets, encoding="utf-8") as fh:
            sets = eval_sets_from_json(fh.read())
    else:
        sets = build_eval_sets(len(images), args.seed)
    with open(os.path.join(args.out, "eval_sets.json"), "w", encoding="utf-8") as fh:
        fh.write(eval_sets_to_json(sets) + "\n")

    report = EvalReport(metadata={"seed": args.seed, "n_images": len(images),
                                  "checkpoints": {n: hash_path(p) for n, p in ckpts.items()}})
    grids = [patchify(img) for img in images]
    for name, path in ckpts.items():
        params = load_params(path)
        report.psnr[name] = score_eval_sets(params, images, sets)
        for s in STRATEGIES:
            rows = []
            for i in range(min(args.n_strips, len(images))):
                m = sets[s][i]
                rows += [images[i], apply_mask(images[i], m, fill=0.5),
                         compose_reconstruction(grids[i], reconstruct(params, grids[i], m), m)]
            if rows:
                write_pnm(os.path.join(args.out, f"recon_{name}_{s}.ppm"), _strip(rows))
    if os.path.exists(os.path.join(args.data, "manifest.jsonl")):
        samples = load_dataset(args.data)
        report.coverage = {s: coverage_histogram(sets[s], samples) for s in STRATEGIES}
    with open(os.path.join(args.out, "psnr_table.csv"), "w", encoding="utf-8") as fh:
        fh.write(psnr_table_csv(report.psnr))
    with open(os.path.join(args.out, "eval_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    man.finish(outputs=["eval_sets.json", "psnr_table.csv", "eval_report.json"])


def cmd_attn(args):
    _need_file(args.ckpt, "--ckpt")
    if args.demo == (args.image is not None):
        raise UsageError("give exactly one of --image or --demo")
    if args.image:
        _need_file(args.image, "image")
    if args.mode == "patch" and args.patch_index is None:
        raise UsageError("--mode patch needs --patch-index")
    if args.mode == "char" and args.char_mask is None and not args.demo:
        raise UsageError("--mode char needs --char-mask (or --demo)")
    if args.char_mask:
        _need_file(args.char_mask, "--char-mask")
    if not 0.0 < args.tau <= 1.0:
        raise UsageError("--tau must lie in (0, 1]")
    man = RunManifest(args.out, "attn", {"mode": args.mode, "patch_index": args.patch_index,
                                         "tau": args.tau, "demo": args.demo},
                      {"seed": args.seed},
                      {"ckpt": args.ckpt, "image": args.image, "char_mask": args.char_mask})
    params = load_params(args.ckpt)
    sample = _demo_sample(args.seed) if args.demo else None
    img = sample.image if sample else prepare_image(read_pnm(args.image))
    grid = patchify(img)
    if args.mode == "cls":
        amap = attention_cls(params, grid, args.tau, image=img)
    elif args.mode == "patch":
        amap = attention_patch(params, grid, args.patch_index, args.tau, image=img)
    else:
        cm = read_pnm(args.char_mask).data[:, :, 0] if args.char_mask else sample.char_mask(0)
        amap = attention_char(params, grid, cm, args.tau)
    write_pnm(os.path.join(args.out, "heatmap.pgm"), amap.heatmap)
    outputs = ["heatmap.pgm", "attention.json"]
    if amap.overlay is not None:
        write_pnm(os.path.join(args.out, "overlay.ppm"), amap.overlay)
        outputs.append("overlay.ppm")
    with open(os.path.join(args.out, "attention.json"), "w", encoding="utf-8") as fh:
        json.dump({"values": amap.values.tolist(), "kept": amap.kept.astype(int).tolist()}, fh)
        fh.write("\n")
    man.finish(outputs=outputs)


def cmd_probe(args):
    if args.ckpt:
        _need_file(args.ckpt, "--ckpt")
    for d in (args.data, args.test_data):
        if d is not None:
            _need_dir(d, "data directory")
    if min(args.n_train, args.n_test) < 1:
        raise UsageError("--n-train and --n-test must be >= 1")
    cfg = ProbeConfig(lr=args.lr, epochs=args.probe_epochs, seed=args.seed)
    man = RunManifest(args.out, "probe", {"encoder": "scratch" if args.scratch else "checkpoint",
                                          "preset": args.preset, "n_train": args.n_train,
                                          "n_test": args.n_test, "layout": PROBE_LAYOUT,
                                          "colors": PROBE_COLORS,
                                          **dataclasses.asdict(cfg)},
                      {"seed": args.seed},
                      {"ckpt": args.ckpt, "data": args.data, "test_data": args.test_data})
    params = load_params(args.ckpt) if args.ckpt else \
        init_params(args.preset, derive_seed(args.seed, "params"))
    synth = probe_config()
    train = load_dataset(args.data) if args.data else \
        make_dataset(args.n_train, synth, derive_seed(args.seed, "probe-train"), PROBE_LAYOUT)[0]
    test = load_dataset(args.test_data) if args.test_data else \
        make_dataset(args.n_test, synth, derive_seed(args.seed, "probe-test"), PROBE_LAYOUT)[0]
    res = probe_train_eval(params, train, test, cfg)
    with open(os.path.join(args.out, "probe.json"), "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(res), fh, indent=2, sort_keys=True)
        fh.write("\n")
    man.finish(outputs=["probe.json"], test_accuracy=res.test_accuracy)


# parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mms", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"mms {__version__} (checkpoint format MMS{CKPT_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic word-image dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-len", type=int, default=3)
    s.add_argument("--max-len", type=int, default=10)
    s.add_argument("--noise-std", type=float, default=0.02)
    s.add_argument("--min-contrast", type=float, default=0.3)
    s.add_argument("--probe-layout", action="store_true",
                   help="fixed layout (each glyph spans three patch columns), dark text on light")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mask", help="preview masks on an image")
    s.add_argument("--image")
    s.add_argument("--demo", action="store_true", help="use a built-in rendered word")
    s.add_argument("--strategy", choices=STRATEGIES + ("all",), default="all")
    s.add_argument("--ratio", type=float)
    s.add_argument("--span-max", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("pretrain", help="masked-image-modeling pre-training")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value file; flags override it")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=("tiny-desk", "vit-tiny"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--warmup-steps", type=int)
    s.add_argument("--total-steps", type=int)
    s.add_argument("--base-lr", type=float)
    s.add_argument("--precision", choices=("float64", "float32"))
    s.add_argument("--strategies", help="comma-separated subset of random,block,span")
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="cross-strategy reconstruction PSNR")
    s.add_argument("--ckpt", action="append", required=True, metavar="[NAME=]PATH")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eval-sets", help="frozen masks from a previous eval run")
    s.add_argument("--n-strips", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attn", help="encoder attention heatmaps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image")
    s.add_argument("--demo", action="store_true")
    s.add_argument("--mode", choices=("cls", "patch", "char"), default="cls")
    s.add_argument("--patch-index", type=int)
    s.add_argument("--char-mask", help="binary PGM the size of the image")
    s.add_argument("--tau", type=float, default=0.6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn)

    s = sub.add_parser("probe", help="linear column probe on a frozen encoder")
    enc = s.add_mutually_exclusive_group(required=True)
    enc.add_argument("--ckpt")
    enc.add_argument("--scratch", action="store_true", help="random-init encoder baseline")
    s.add_argument("--preset", choices=("tiny-desk", "vit-tiny"), default="tiny-desk")
    s.add_argument("--data", help="training set (synth --probe-layout); generated if omitted")
    s.add_argument("--test-data")
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=1000)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--probe-epochs", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        args.func(args)
    except (UsageError, ConfigError, LayoutError) as exc:
        print(f"mms {args.command}: {exc}", file=sys.stderr)
        return 2
    except (MMSError, OSError, ValueError, IndexError) as exc:
        print(f"mms {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

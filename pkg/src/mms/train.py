"""AdamW + warm-up/cosine schedule and the deterministic pre-training loop."""

import csv
import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import ConfigError, RangeError, ShapeError
from .masking import STRATEGIES, BlockConfig, SpanConfig, usable_mask
from .model import ModelDims, MmsParams, decays, forward_branches, init_params
from .patches import normalize_targets, patchify, prepare_image
from .rng import SplitMix64, derive_seed

METRICS_HEADER = ["step", "lr", "L_r", "L_b", "L_s", "L_MMS"]
BRANCH_COLUMNS = {"random": "L_r", "block": "L_b", "span": "L_s"}


@dataclass
class TrainConfig:
    preset: str = "tiny-desk"
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    warmup_steps: int = 200
    epochs: int = 3
    total_steps: int = None  # derived from epochs and dataset size when None
    batch_size: int = 32
    seed: int = 0
    strategies: tuple = STRATEGIES
    ratio_random: float = 0.75
    ratio_block: float = 0.50
    ratio_span: float = 0.50
    span_max: int = 8
    block_min_patches: int = 4
    block_aspect_min: float = 0.3
    block_aspect_max: float = 1 / 0.3
    checkpoint_every: int = 0
    log_every: int = 1
    precision: str = "float64"

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"strategies must be a non-empty subset of {STRATEGIES}, got {self.strategies}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        return self

    @property
    def ratios(self):
        return {"random": self.ratio_random, "block": self.ratio_block, "span": self.ratio_span}

    @property
    def span_config(self):
        return SpanConfig(self.ratio_span, self.span_max)

    @property
    def block_config(self):
        return BlockConfig(self.ratio_block, self.block_min_patches,
                           (self.block_aspect_min, self.block_aspect_max))

    def resolved(self, n_samples):
        """Copy with ``total_steps`` filled in and warm-up clipped to it."""
        total = self.total_steps
        if total is None:
            total = self.epochs * math.ceil(n_samples / self.batch_size)
        return dataclasses.replace(self, total_steps=total, warmup_steps=min(self.warmup_steps, total))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["strategies"] = ",".join(self.strategies)
        return d


PAPER_PROFILE = {"batch_size": 512, "warmup_steps": 5000, "epochs": 3}


def _coerce(fld, raw):
    name, default = fld.name, fld.default
    if isinstance(raw, str):
        raw = raw.strip()
    if name == "strategies":
        if isinstance(raw, str):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return tuple(raw)
    if name == "total_steps":
        return None if raw in (None, "", "none", "None") else int(raw)
    if isinstance(default, bool):
        return str(raw).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def make_config(**overrides):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for key, value in overrides.items():
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _coerce(fields[key], value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return TrainConfig(**kwargs).validate()


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(cfg):
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in cfg.to_dict().items())


def lr_at(step, cfg):
    """Linear warm-up to ``base_lr`` then half-cosine decay to zero at ``total_steps``."""
    total, warm = cfg.total_steps, cfg.warmup_steps
    if total is None:
        raise ConfigError("total_steps is unresolved")
    if step < 0 or step > total:
        raise RangeError(f"step {step} outside [0, {total}]")
    if step < warm:
        return cfg.base_lr * step / warm
    if total == warm:
        return cfg.base_lr
    progress = (step - warm) / (total - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()}, 0)


def adamw_step(params, grads, opt, lr, cfg, decay=decays):
    """One AdamW update with decoupled weight decay.

    ``params`` maps names to Tensors (an :class:`MmsParams` works). Names for
    which ``decay(name)`` is false are not decayed. Missing gradients count
    as zero. Returns ``(new_params_dict, new_opt_state)``.
    """
    t = opt.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, tensor in params.items():
        p = tensor.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or opt.m[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} / moment {opt.m[name].shape} for {p.shape}")
        m = b1 * opt.m[name] + (1.0 - b1) * g
        v = b2 * opt.v[name] + (1.0 - b2) * (g * g)
        if cfg.weight_decay and decay(name):
            p = p * (1.0 - lr * cfg.weight_decay)
        p = p - lr * ((m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))
        new_p[name] = ad.Tensor(p.astype(tensor.data.dtype, copy=False), requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return new_p, OptState(new_m, new_v, t)


@dataclass
class Sample:
    """A patchified training image with cached normalised targets."""

    grid: object
    targets: object

    @classmethod
    def from_image(cls, img, patch_size=4):
        grid = patchify(prepare_image(img), patch_size)
        return cls(grid, normalize_targets(grid))


def sample_masks(cfg, step, index, grid_h=8, grid_w=32):
    """Fresh masks for one sample at one step, seeded by ``(seed, step, index)``."""
    seed = derive_seed(cfg.seed, "step", step, "sample", index)
    ratios = cfg.ratios
    return {s: usable_mask(s, grid_h, grid_w, ratios[s], derive_seed(seed, "mask", s),
                           cfg.span_config, cfg.block_config)
            for s in cfg.strategies}


@dataclass
class StepResult:
    params: MmsParams
    opt: OptState
    loss: float
    branch_losses: dict
    lr: float


def train_step(params, opt, batch, step, cfg, masks=None):
    """Forward/backward over a batch and one AdamW update.

    Per-sample graphs are differentiated one at a time and their gradients
    summed in batch order, then scaled by ``1/len(batch)``. Returns a
    :class:`StepResult` with batch-mean losses.
    """
    if not batch:
        raise ValueError("empty batch")
    names = params.names()
    grads = {}
    total = 0.0
    branch = {}
    inv_b = 1.0 / len(batch)
    for i, sample in enumerate(batch):
        if not isinstance(sample, Sample):
            sample = Sample(sample, normalize_targets(sample))
        mk = masks[i] if masks is not None else sample_masks(cfg, step, i, sample.grid.grid_h,
                                                             sample.grid.grid_w)
        with ad.Tape():
            res = forward_branches(params, sample.grid, mk, sample.targets)
            g = ad.backward(ad.scale(res.total, inv_b))
        for name in names:
            gi = g.get(params[name])
            if gi is None:
                continue
            if name in grads:
                grads[name] += gi
            else:
                grads[name] = gi.copy()
        total += res.total.item()
        for s, loss in res.losses.items():
            branch[s] = branch.get(s, 0.0) + loss.item()
    lr = lr_at(step, cfg)
    new_p, new_opt = adamw_step(params.tensors, grads, opt, lr, cfg)
    return StepResult(MmsParams(params.dims, new_p), new_opt, total * inv_b,
                      {s: v * inv_b for s, v in branch.items()}, lr)


# checkpoints -------------------------------------------------------------

def state_tensors(params, opt=None, step=0):
    out = {"meta.dims": params.dims.as_vector(), "meta.step": np.array([float(step)])}
    out.update({n: t.data for n, t in params.items()})
    if opt is not None:
        out["meta.opt_step"] = np.array([float(opt.step)])
        out.update({f"opt.m.{n}": a for n, a in opt.m.items()})
        out.update({f"opt.v.{n}": a for n, a in opt.v.items()})
    return out


def save_state(path, params, opt=None, step=0, dtype=None):
    checkpoint.save(path, state_tensors(params, opt, step), dtype)


def params_from_tensors(tensors):
    dims = ModelDims.from_vector(tensors["meta.dims"])
    arrays = {k: v for k, v in tensors.items() if not k.startswith(("meta.", "opt."))}
    return MmsParams(dims, {n: ad.Tensor(a, requires_grad=True) for n, a in arrays.items()})


def load_state(path):
    """Return ``(params, opt_or_None, step)`` from a checkpoint file."""
    tensors = checkpoint.load(path)
    if "meta.dims" not in tensors:
        raise checkpoint.CheckpointError(f"{path}: missing model dimensions")
    params = params_from_tensors(tensors)
    opt = None
    if "meta.opt_step" in tensors:
        opt = OptState({n: tensors[f"opt.m.{n}"] for n in params.names()},
                       {n: tensors[f"opt.v.{n}"] for n in params.names()},
                       int(tensors["meta.opt_step"][0]))
    return params, opt, int(tensors["meta.step"][0])


def load_params(path):
    return load_state(path)[0]


# loop ----------------------------------------------------------------------

def epoch_order(seed, epoch, n):
    return SplitMix64(derive_seed(seed, "epoch", epoch)).shuffle(range(n))


def batches_for_step(cfg, step, n):
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    epoch, b = divmod(step, steps_per_epoch)
    order = epoch_order(cfg.seed, epoch, n)
    return order[b * cfg.batch_size:(b + 1) * cfg.batch_size]


def metrics_row(step, res):
    row = [str(step), repr(res.lr)]
    for s in STRATEGIES:
        row.append(repr(res.branch_losses[s]) if s in res.branch_losses else "")
    row.append(repr(res.loss))
    return row


def train_loop(cfg, dataset, out_dir=None, resume=None, params=None, on_step=None, until=None):
    """Pre-train on ``dataset`` (images or :class:`Sample` objects).

    Writes ``metrics.csv`` (deterministic), ``timing.csv`` (wall clock),
    periodic ``ckpt_stepXXXXXX.mms`` files and ``final.mms`` under
    ``out_dir`` when given. ``resume`` is a checkpoint path whose step and
    optimiser state are continued. ``until`` stops early (exclusive step)
    without changing the schedule; ``final.mms`` is then not written.
    Returns ``(params, opt, history)``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = cfg.validate().resolved(len(dataset))
    with ad.precision(cfg.precision):
        samples = [s if isinstance(s, Sample) else Sample.from_image(s) for s in dataset]
        start = 0
        opt = None
        if resume is not None:
            params, opt, start = load_state(resume)
        elif params is None:
            params = init_params(cfg.preset, derive_seed(cfg.seed, "params"))
        params = params.replace({n: a.astype(cfg.precision) for n, a in params.arrays().items()})
        if opt is None:
            opt = OptState.zeros_like(params)
        history = []
        writer = timing = None
        files = []
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            mode = "a" if resume is not None and os.path.exists(os.path.join(out_dir, "metrics.csv")) else "w"
            try:
                mfh = open(os.path.join(out_dir, "metrics.csv"), mode, newline="")
                tfh = open(os.path.join(out_dir, "timing.csv"), mode, newline="")
            except OSError as exc:
                raise OSError(f"cannot open metrics in {out_dir}: {exc}") from exc
            files = [mfh, tfh]
            writer, timing = csv.writer(mfh, lineterminator="\n"), csv.writer(tfh, lineterminator="\n")
            if mode == "w":
                writer.writerow(METRICS_HEADER)
                timing.writerow(["step", "wall_time"])
            if start == 0 and resume is None:
                save_state(os.path.join(out_dir, "init.mms"), params)
        t0 = time.perf_counter()
        try:
            stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
            for step in range(start, stop):
                idx = batches_for_step(cfg, step, len(samples))
                res = train_step(params, opt, [samples[i] for i in idx], step, cfg)
                params, opt = res.params, res.opt
                history.append((step, res.lr, dict(res.branch_losses), res.loss))
                if writer is not None and step % cfg.log_every == 0:
                    writer.writerow(metrics_row(step, res))
                    timing.writerow([step, f"{time.perf_counter() - t0:.3f}"])
                    for fh in files:
                        fh.flush()
                if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    save_state(os.path.join(out_dir, f"ckpt_step{step + 1:06d}.mms"), params, opt, step + 1)
                if on_step is not None:
                    on_step(step, res)
            if out_dir is not None and stop == cfg.total_steps:
                save_state(os.path.join(out_dir, "final.mms"), params, opt, cfg.total_steps)
        finally:
            for fh in files:
                fh.close()
    return params, opt, history

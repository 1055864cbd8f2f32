"""Reconstruction PSNR, character coverage and frozen-encoder probing."""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation, GeometryError
from .masking import DEFAULT_RATIOS, STRATEGIES, MaskSet, mask_to_bitmap, usable_mask
from .model import decode_with_mask_tokens, encode_tokens, encode_visible
from .patches import ImageBuf, depatchify, patch_stats, patchify, prepare_image
from .rng import derive_seed

PSNR_INF = float("inf")


def compose_reconstruction(grid, recon, mask):
    """Original image with only the masked patches replaced by predictions.

    Predictions are per-patch normalised, so they are mapped back with the
    original patch's mean/std and clipped to [0, 1]. Visible patches are
    copied unchanged.
    """
    grid.validate()
    pred = np.asarray(getattr(recon, "data", recon), dtype=np.float64)
    if pred.shape != (grid.num_patches, grid.patch_dim) or \
            (mask.grid_h, mask.grid_w) != (grid.grid_h, grid.grid_w):
        raise GeometryError("reconstruction, mask and grid disagree in shape")
    orig = grid.patches.data
    out = orig.copy()
    idx = list(mask.masked)
    if idx:
        mean, std = patch_stats(orig[idx])
        out[idx] = np.clip(pred[idx] * std[:, None] + mean[:, None], 0.0, 1.0)
    return depatchify(replace(grid, patches=Tensor(out)))


def psnr(a, b, peak=1.0):
    """``10 log10(peak^2 / MSE)`` over all pixels and channels; ``inf`` if identical."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise GeometryError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def reconstruct(params, grid, mask):
    feats, _ = encode_visible(params, grid, mask)
    return decode_with_mask_tokens(params, feats, mask).data


# evaluation sets -----------------------------------------------------------

def build_eval_sets(n_images, seed, ratios=None, grid_h=8, grid_w=32, span_cfg=None, block_cfg=None):
    """Frozen masks per ``(strategy, image)``: ``{strategy: [MaskSet, ...]}``."""
    if n_images < 1:
        raise ValueError("need at least one image")
    ratios = {**DEFAULT_RATIOS, **(ratios or {})}
    return {s: [usable_mask(s, grid_h, grid_w, ratios[s], derive_seed(seed, "eval", s, i),
                            span_cfg, block_cfg)
                for i in range(n_images)]
            for s in STRATEGIES}


def eval_sets_to_json(sets):
    return json.dumps({s: [m.to_dict() for m in masks] for s, masks in sets.items()}, sort_keys=True)


def eval_sets_from_json(text):
    raw = json.loads(text)
    return {s: [MaskSet.from_dict(d) for d in raw[s]] for s in STRATEGIES if s in raw}


def score_eval_sets(params, images, sets):
    """Mean per-image PSNR of composed reconstructions for each eval set."""
    grids = [patchify(prepare_image(img)) for img in images]
    out = {}
    for s, masks in sets.items():
        if len(masks) != len(grids):
            raise GeometryError(f"{s}: {len(masks)} masks for {len(grids)} images")
        vals = []
        for grid, mask in zip(grids, masks):
            comp = compose_reconstruction(grid, reconstruct(params, grid, mask), mask)
            vals.append(psnr(comp, depatchify(grid)))
        out[s] = float(np.mean(vals))
    return out


def psnr_table_csv(rows):
    """CSV text with one row per model: strategy columns plus their average."""
    lines = ["model,random_75,block_50,span_50,avg"]
    for name, scores in rows.items():
        vals = [scores[s] for s in STRATEGIES]
        lines.append(",".join([name] + [f"{v:.4f}" for v in vals] + [f"{np.mean(vals):.4f}"]))
    return "\n".join(lines) + "\n"


def table_pattern(rows, own=None):
    """Per eval set, whether the matching single-strategy model is the column
    maximum and the MMS model is not the column minimum."""
    own = own or {"random": "random", "block": "block", "span": "span"}
    result = {}
    for s in STRATEGIES:
        col = {name: scores[s] for name, scores in rows.items()}
        best = max(col, key=col.get)
        worst = min(col, key=col.get)
        result[s] = {"best": best, "worst": worst,
                     "holds": best == own[s] and worst != "mms"}
    return result


# character coverage -----------------------------------------------------------

def char_coverage(mask, sample, patch_size=4):
    """Per character: fraction of its box pixels under masked patches, and
    whether it is fully masked."""
    hidden = 1.0 - mask_to_bitmap(mask, patch_size).data[:, :, 0]
    if hidden.shape != (sample.image.height, sample.image.width):
        raise GeometryError("mask and sample image differ in size")
    out = []
    for x0, y0, x1, y1 in sample.char_boxes:
        frac = float(hidden[y0:y1, x0:x1].mean())
        out.append((frac, frac == 1.0))
    return out


def coverage_histogram(masks, samples, bins=10, patch_size=4):
    fracs = [f for m, s in zip(masks, samples) for f, _ in char_coverage(m, s, patch_size)]
    counts, edges = np.histogram(fracs, bins=bins, range=(0.0, 1.0))
    full = sum(1 for m, s in zip(masks, samples) for _, full in char_coverage(m, s, patch_size) if full)
    return {"counts": counts.tolist(), "edges": edges.tolist(),
            "fully_masked": full, "characters": len(fracs)}


# probing ----------------------------------------------------------------------

def params_hash(params, names=None):
    h = hashlib.sha256()
    for name in names or params.names():
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype=np.float64).tobytes())
    return h.hexdigest()


def column_features(params, images):
    """``[n, grid_w, d_model]`` encoder features, averaged over each patch column.

    The encoder sees the full (unmasked) image; the CLS token is dropped.
    """
    out = []
    for img in images:
        grid = patchify(prepare_image(img))
        feats, _ = encode_tokens(params, grid.patches, list(range(grid.num_patches)))
        tok = feats.data[1:].reshape(grid.grid_h, grid.grid_w, -1)
        out.append(tok.mean(axis=0))
    return np.stack(out)


def assert_frozen(grads, params):
    """Raise if any encoder parameter received a gradient."""
    frozen = {id(params[n]) for n in params.encoder_names()}
    leaked = [t for t in grads if id(t) in frozen]
    if leaked:
        raise ContractViolation(f"{len(leaked)} encoder tensors received gradients during probing")


@dataclass
class ProbeConfig:
    lr: float = 1e-2
    epochs: int = 30
    batch_size: int = 1024
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    test_char_accuracy: float
    encoder_hash_before: str
    encoder_hash_after: str


def probe_train_eval(params, train_samples, test_samples, cfg=None):
    """Fit a linear column classifier on frozen encoder features."""
    from .estimators import ColumnProbe
    from .synth import column_labels

    cfg = cfg or ProbeConfig()
    names = params.encoder_names()
    before = params_hash(params, names)
    xtr = column_features(params, [s.image for s in train_samples])
    xte = column_features(params, [s.image for s in test_samples])
    ytr = np.stack([column_labels(s) for s in train_samples])
    yte = np.stack([column_labels(s) for s in test_samples])
    d = xtr.shape[-1]
    probe = ColumnProbe(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                        weight_decay=cfg.weight_decay, random_state=cfg.seed)
    probe.fit(xtr.reshape(-1, d), ytr.reshape(-1), frozen=params)
    after = params_hash(params, names)
    if before != after:
        raise ContractViolation("encoder parameters changed during probing")
    pred_te = probe.predict(xte.reshape(-1, d))
    y = yte.reshape(-1)
    chars = y > 0
    return ProbeResult(
        float(probe.score(xtr.reshape(-1, d), ytr.reshape(-1))),
        float(np.mean(pred_te == y)),
        float(np.mean(pred_te[chars] == y[chars])) if chars.any() else float("nan"),
        before, after)


@dataclass
class EvalReport:
    psnr: dict = field(default_factory=dict)
    coverage: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))

"""Deterministic synthetic word images with per-character ground truth.

Words over ``A-Z0-9`` are drawn with the embedded 5x7 font scaled 2x or 3x
onto a 32x128 RGB canvas. Character ``i`` of a word placed at origin
``(top, left)`` with glyph scale ``k`` and inter-glyph gap ``g`` occupies the
box ``(x0, y0, x1, y1) = (left + i*(5k+g), top, x0 + 5k, top + 7k)``
(``x1``/``y1`` exclusive).
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LayoutError
from .font5x7 import CHARSET, GLYPH_H, GLYPH_W, glyph
from .imageio import read_pnm, write_pnm
from .patches import IMAGE_HEIGHT, IMAGE_WIDTH, ImageBuf, prepare_image
from .rng import SplitMix64, derive_seed, gaussian_block


@dataclass(frozen=True)
class SynthConfig:
    charset: str = CHARSET
    min_len: int = 3
    max_len: int = 10
    scales: tuple = (2, 3)
    gap_range: tuple = (1, 2)      # gap in glyph-scale units
    fg_range: tuple = (0.0, 1.0)   # per-channel colour ranges
    bg_range: tuple = (0.0, 1.0)
    min_contrast: float = 0.3      # |mean(fg) - mean(bg)|, must be >= 0.2
    noise_std: float = 0.02
    height: int = IMAGE_HEIGHT
    width: int = IMAGE_WIDTH

    def validate(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.min_contrast < 0.2 or self.min_contrast > 0.9:
            raise ValueError("min_contrast must lie in [0.2, 0.9]")
        for lo, hi in (self.fg_range, self.bg_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("colour ranges must satisfy 0 <= lo <= hi <= 1")
        (flo, fhi), (blo, bhi) = self.fg_range, self.bg_range
        if max(fhi - blo, bhi - flo) < self.min_contrast:
            raise ValueError("colour ranges cannot reach min_contrast")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if capacity(min(self.scales), self.gap_range[0] * min(self.scales), self.width) < self.min_len:
            raise ValueError("min_len words do not fit the canvas")
        return self


# Layout used by the column probe: every glyph spans exactly three 4-px columns.
PROBE_LAYOUT = {"scale": 2, "gap": 2, "origin": (9, 4)}
# Probe words are dark on light. With free polarity, column means of a glyph
# and of its inverse coincide up to sign and no linear head separates them.
PROBE_COLORS = {"fg_range": (0.0, 0.3), "bg_range": (0.7, 1.0)}


def probe_config(cfg=None):
    return replace(cfg or SynthConfig(), **PROBE_COLORS)


@dataclass(eq=False)
class SyntheticSample:
    image: ImageBuf
    word: str
    char_boxes: list
    seed: int
    scale: int
    fg: tuple = field(default=None)
    bg: tuple = field(default=None)

    def char_mask(self, i):
        """Binary glyph mask of character ``i`` at image resolution."""
        x0, y0, x1, y1 = self.char_boxes[i]
        out = np.zeros((self.image.height, self.image.width), dtype=bool)
        out[y0:y1, x0:x1] = glyph(self.word[i], self.scale)
        return out

    def char_masks(self):
        return [self.char_mask(i) for i in range(len(self.word))]

    def box_mask(self, i):
        x0, y0, x1, y1 = self.char_boxes[i]
        out = np.zeros((self.image.height, self.image.width), dtype=bool)
        out[y0:y1, x0:x1] = True
        return out

    def manifest_row(self, index=None):
        row = {"word": self.word, "seed": self.seed, "scale": self.scale,
               "boxes": [list(b) for b in self.char_boxes]}
        if index is not None:
            row = {"index": index, **row}
        return row


def capacity(scale, gap_px, width=IMAGE_WIDTH):
    """Largest word length that fits ``width`` pixels."""
    return (width + gap_px) // (GLYPH_W * scale + gap_px)


def word_width(n, scale, gap_px):
    return n * GLYPH_W * scale + (n - 1) * gap_px


def _colors(rng, cfg):
    for _ in range(1000):
        bg = tuple(rng.uniform(*cfg.bg_range) for _ in range(3))
        fg = tuple(rng.uniform(*cfg.fg_range) for _ in range(3))
        if abs(sum(fg) / 3 - sum(bg) / 3) >= cfg.min_contrast:
            return fg, bg
    # pathological seeds: the most contrasting corner of the ranges
    (flo, fhi), (blo, bhi) = cfg.fg_range, cfg.bg_range
    if fhi - blo >= bhi - flo:
        return (fhi,) * 3, (blo,) * 3
    return (flo,) * 3, (bhi,) * 3


def render_word(word, cfg=None, seed=0, scale=None, gap=None, origin=None):
    """Draw ``word`` and return a :class:`SyntheticSample`.

    ``scale``, ``gap`` (pixels) and ``origin`` ``(top, left)`` are sampled
    from ``seed`` unless given.
    """
    cfg = cfg or SynthConfig()
    if not word:
        raise LayoutError("empty word")
    if any(ch not in cfg.charset for ch in word):
        raise LayoutError(f"word {word!r} has characters outside the charset")
    rng = SplitMix64(seed)
    k = scale if scale is not None else cfg.scales[rng.randint(0, len(cfg.scales) - 1)]
    g = gap if gap is not None else k * rng.randint(*cfg.gap_range)
    w_px, h_px = word_width(len(word), k, g), GLYPH_H * k
    if w_px > cfg.width or h_px > cfg.height:
        raise LayoutError(f"{word!r} needs {w_px}x{h_px} px at scale {k}, canvas is {cfg.width}x{cfg.height}")
    fg, bg = _colors(rng, cfg)
    if origin is None:
        top = rng.randint(0, cfg.height - h_px)
        left = rng.randint(0, cfg.width - w_px)
    else:
        top, left = origin
        if top < 0 or left < 0 or top + h_px > cfg.height or left + w_px > cfg.width:
            raise LayoutError(f"{word!r} at origin {origin} leaves the canvas")
    ink = np.zeros((cfg.height, cfg.width), dtype=bool)
    boxes = []
    for i, ch in enumerate(word):
        x0 = left + i * (GLYPH_W * k + g)
        box = (x0, top, x0 + GLYPH_W * k, top + h_px)
        ink[box[1]:box[3], box[0]:box[2]] |= glyph(ch, k)
        boxes.append(box)
    img = np.where(ink[:, :, None], np.array(fg), np.array(bg))
    if cfg.noise_std > 0:
        noise = gaussian_block(derive_seed(seed, "noise"), img.size, 0.0, cfg.noise_std)
        img = img + noise.reshape(img.shape)
    img = np.clip(img, 0.0, 1.0)
    return SyntheticSample(ImageBuf(img), word, boxes, int(seed), int(k), fg, bg)


def random_word(rng, cfg, max_len):
    n = rng.randint(cfg.min_len, max(cfg.min_len, min(cfg.max_len, max_len)))
    return "".join(cfg.charset[rng.randint(0, len(cfg.charset) - 1)] for _ in range(n))


def sample_seed(seed, index):
    return derive_seed(seed, "sample", index)


def make_sample(cfg, seed, layout=None):
    """One random word rendered from ``seed``; ``layout`` pins scale/gap/origin."""
    rng = SplitMix64(derive_seed(seed, "word"))
    if layout is None:
        k = cfg.scales[rng.randint(0, len(cfg.scales) - 1)]
        g = k * rng.randint(*cfg.gap_range)
        word = random_word(rng, cfg, capacity(k, g, cfg.width))
        return render_word(word, cfg, seed, scale=k, gap=g)
    k, g, (top, left) = layout["scale"], layout["gap"], layout["origin"]
    word = random_word(rng, cfg, capacity(k, g, cfg.width - left))
    return render_word(word, cfg, seed, scale=k, gap=g, origin=(top, left))


def make_dataset(n, cfg=None, seed=0, layout=None):
    """``n`` samples with per-sample seeds ``derive_seed(seed, "sample", i)``.

    Returns ``(samples, manifest_rows)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = (cfg or SynthConfig()).validate()
    samples = [make_sample(cfg, sample_seed(seed, i), layout) for i in range(n)]
    return samples, [s.manifest_row(i) for i, s in enumerate(samples)]


def write_dataset(out_dir, samples):
    """Write ``sample_XXXXX.ppm`` files and ``manifest.jsonl``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            name = f"sample_{i:05d}.ppm"
            write_pnm(os.path.join(out_dir, name), s.image)
            fh.write(json.dumps({**s.manifest_row(i), "file": name}, sort_keys=True) + "\n")


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.jsonl")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(data_dir):
    """Samples written by :func:`write_dataset` (pixels are 8-bit quantised)."""
    out = []
    for row in read_manifest(data_dir):
        img = read_pnm(os.path.join(data_dir, row["file"]))
        out.append(SyntheticSample(img, row["word"], [tuple(b) for b in row["boxes"]],
                                   row["seed"], row["scale"]))
    return out


def load_external(data_dir):
    """Every ``.ppm``/``.pgm`` in ``data_dir`` (sorted), as 32x128 RGB."""
    names = sorted(f for f in os.listdir(data_dir) if f.lower().endswith((".ppm", ".pgm")))
    if not names:
        raise OSError(f"no PPM/PGM images in {data_dir}")
    return [prepare_image(read_pnm(os.path.join(data_dir, f))) for f in names]


def load_images(data_dir):
    """Images of a synthesized dataset dir, or of any folder of PPM/PGM files."""
    if os.path.exists(os.path.join(data_dir, "manifest.jsonl")):
        return [s.image for s in load_dataset(data_dir)]
    return load_external(data_dir)


def column_labels(sample, grid_w=32, patch_size=4, charset=CHARSET):
    """Per patch column: ``1 + charset index`` of the character whose box holds
    the column centre, or 0 (blank)."""
    labels = np.zeros(grid_w, dtype=np.int64)
    for c in range(grid_w):
        cx = c * patch_size + patch_size / 2
        for (x0, _, x1, _), ch in zip(sample.char_boxes, sample.word):
            if x0 <= cx < x1:
                labels[c] = 1 + charset.index(ch)
                break
    return labels

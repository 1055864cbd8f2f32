"""Random-patch, blockwise and span mask generators over a patch grid.

All generators are pure functions of ``(grid dims, config, seed)`` and draw
from :class:`mms.rng.SplitMix64`. Indices are row-major patch indices.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, MaskBudgetError
from .patches import ImageBuf
from .rng import SplitMix64, derive_seed

STRATEGIES = ("random", "block", "span")
DEFAULT_RATIOS = {"random": 0.75, "block": 0.50, "span": 0.50}


@dataclass(frozen=True, eq=False)
class MaskSet:
    grid_h: int
    grid_w: int
    masked: tuple
    strategy: str
    target_ratio: float
    blocks: tuple = ()  # (top, left, height, width) log for block masks

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.masked))
        n = self.grid_h * self.grid_w
        if len(set(idx)) != len(idx):
            raise GeometryError("duplicate masked index")
        if idx and (idx[0] < 0 or idx[-1] >= n):
            raise GeometryError(f"masked index out of range [0, {n})")
        object.__setattr__(self, "masked", idx)

    @property
    def num_patches(self):
        return self.grid_h * self.grid_w

    def __len__(self):
        return len(self.masked)

    @property
    def ratio(self):
        return len(self.masked) / self.num_patches

    def visible(self):
        hidden = set(self.masked)
        return tuple(i for i in range(self.num_patches) if i not in hidden)

    def as_bool(self):
        out = np.zeros(self.num_patches, dtype=bool)
        out[list(self.masked)] = True
        return out

    def to_dict(self):
        d = {"grid_h": self.grid_h, "grid_w": self.grid_w, "strategy": self.strategy,
             "target_ratio": self.target_ratio, "masked": list(self.masked)}
        if self.blocks:
            d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["grid_h"], d["grid_w"], tuple(d["masked"]), d["strategy"],
                   d["target_ratio"], tuple(tuple(b) for b in d.get("blocks", ())))

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return (self.grid_h, self.grid_w, self.masked, self.strategy) == \
            (other.grid_h, other.grid_w, other.masked, other.strategy)

    def __hash__(self):
        return hash((self.grid_h, self.grid_w, self.masked, self.strategy))


@dataclass(frozen=True)
class SpanConfig:
    ratio: float = 0.5
    max_span: int = 8
    max_attempts: int = None  # default 10 * grid_w

    def validate(self, grid_w):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"span ratio must be in (0, 1], got {self.ratio}")
        if not 1 <= self.max_span <= grid_w:
            raise ConfigError(f"max_span must be in [1, {grid_w}], got {self.max_span}")
        if self.max_attempts is not None and self.max_attempts < 1:
            raise ConfigError("max_attempts must be positive")


@dataclass(frozen=True)
class BlockConfig:
    ratio: float = 0.5
    min_block_patches: int = 4
    aspect_range: tuple = field(default=(0.3, 1 / 0.3))
    max_attempts: int = None  # default 10 * N

    def validate(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"block ratio must be in (0, 1], got {self.ratio}")
        lo, hi = self.aspect_range
        if not 0 < lo <= 1 <= hi:
            raise ConfigError(f"aspect range must straddle 1, got {self.aspect_range}")
        if self.min_block_patches < 1:
            raise ConfigError("min_block_patches must be >= 1")
        if self.max_attempts is not None and self.max_attempts < 1:
            raise ConfigError("max_attempts must be positive")


def round_half_up(x):
    return int(math.floor(x + 0.5))


def random_mask(grid_h, grid_w, ratio, seed):
    """Exactly ``round(ratio * N)`` patches, uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"ratio must be in [0, 1], got {ratio}")
    n = grid_h * grid_w
    k = round_half_up(ratio * n)
    picked = SplitMix64(seed).sample(n, k)
    return MaskSet(grid_h, grid_w, tuple(picked), "random", ratio)


def block_shape(area, aspect, grid_h, grid_w):
    h = int(round(math.sqrt(area * aspect)))
    w = int(round(math.sqrt(area / aspect)))
    return min(max(h, 1), grid_h), min(max(w, 1), grid_w)


def block_mask(grid_h, grid_w, cfg=None, seed=0):
    """Union of random rectangles (overlap allowed) until ``|M| >= R * N``.

    Each draw samples an area in ``[min_block_patches, max(min, ceil(R*N - |M|))]``,
    a log-uniform aspect ratio from ``aspect_range``, clamps the rectangle to
    the grid and places it uniformly. The rectangles are kept in
    ``MaskSet.blocks`` so the mask can be replayed.
    """
    cfg = cfg or BlockConfig()
    cfg.validate()
    n = grid_h * grid_w
    target = cfg.ratio * n
    attempts = cfg.max_attempts or 10 * n
    rng = SplitMix64(seed)
    log_lo, log_hi = math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1])
    grid = np.zeros((grid_h, grid_w), dtype=bool)
    count = 0
    blocks = []
    for _ in range(attempts):
        if count >= target:
            break
        hi = max(cfg.min_block_patches, math.ceil(target - count))
        area = rng.uniform(cfg.min_block_patches, hi)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h, w = block_shape(area, aspect, grid_h, grid_w)
        top = rng.randint(0, grid_h - h)
        left = rng.randint(0, grid_w - w)
        grid[top:top + h, left:left + w] = True
        count = int(grid.sum())
        blocks.append((top, left, h, w))
    mask = MaskSet(grid_h, grid_w, tuple(np.flatnonzero(grid)), "block", cfg.ratio, tuple(blocks))
    if count < target:
        raise MaskBudgetError(f"block mask reached {count}/{n} patches, target {target:g}", mask)
    return mask


def replay_blocks(grid_h, grid_w, blocks):
    """Masked indices covered by a recorded rectangle log."""
    grid = np.zeros((grid_h, grid_w), dtype=bool)
    for top, left, h, w in blocks:
        grid[top:top + h, left:left + w] = True
    return tuple(int(i) for i in np.flatnonzero(grid))


def span_spacing(ratio, span):
    """Required free columns on each side of a new span."""
    if ratio <= 0.4:
        return span
    if ratio <= 0.7:
        return 1
    return 0


def span_mask(grid_h, grid_w, cfg=None, seed=0):
    """Full-height column spans with ratio-dependent spacing.

    A span of ``s`` columns (``s`` uniform in ``[1, max_span]``) starts at a
    uniform column ``l`` in ``[0, grid_w - s]`` and covers ``l .. l+s-1``. It is
    accepted only if the ``k`` columns on each side are unmasked, where
    ``k`` comes from :func:`span_spacing`. Sampling stops once more than
    ``R * N`` patches are masked (or every patch is).
    """
    cfg = cfg or SpanConfig()
    cfg.validate(grid_w)
    n = grid_h * grid_w
    target = cfg.ratio * n
    attempts = cfg.max_attempts or 10 * grid_w
    rng = SplitMix64(seed)
    cols = np.zeros(grid_w, dtype=bool)
    count = 0
    for _ in range(attempts):
        if count > target or count == n:
            break
        s = rng.randint(1, cfg.max_span)
        left = rng.randint(0, max(0, grid_w - s))
        right = min(left + s, grid_w) - 1
        k = span_spacing(cfg.ratio, s)
        if k:
            if cols[max(0, left - k):left].any() or cols[right + 1:right + 1 + k].any():
                continue
        cols[left:right + 1] = True
        count = int(cols.sum()) * grid_h
    masked = tuple(r * grid_w + c for r in range(grid_h) for c in np.flatnonzero(cols))
    mask = MaskSet(grid_h, grid_w, masked, "span", cfg.ratio)
    if not (count > target or count == n):
        raise MaskBudgetError(f"span mask reached {count}/{n} patches, target > {target:g}", mask)
    return mask


def branch_seed(seed, strategy):
    return derive_seed(seed, "mask", strategy)


def make_mask(strategy, grid_h, grid_w, ratio, seed, span_cfg=None, block_cfg=None):
    if strategy == "random":
        return random_mask(grid_h, grid_w, ratio, seed)
    if strategy == "block":
        cfg = block_cfg or BlockConfig()
        return block_mask(grid_h, grid_w, BlockConfig(ratio, cfg.min_block_patches,
                                                      cfg.aspect_range, cfg.max_attempts), seed)
    if strategy == "span":
        cfg = span_cfg or SpanConfig()
        return span_mask(grid_h, grid_w, SpanConfig(ratio, cfg.max_span, cfg.max_attempts), seed)
    raise ConfigError(f"unknown masking strategy {strategy!r}")


def multi_mask(grid_h, grid_w, ratios=None, span_cfg=None, block_cfg=None, seed=0):
    """One mask per strategy from sub-seeds ``derive_seed(seed, "mask", strategy)``."""
    ratios = {**DEFAULT_RATIOS, **(ratios or {})}
    return tuple(make_mask(s, grid_h, grid_w, ratios[s], branch_seed(seed, s), span_cfg, block_cfg)
                 for s in STRATEGIES)


def usable_mask(strategy, grid_h, grid_w, ratio, seed, span_cfg=None, block_cfg=None,
                min_fraction=0.8, max_resamples=100):
    """Sample a mask, tolerating budget failures.

    A partial mask holding at least ``min_fraction * R * N`` patches is
    accepted; otherwise the sampler is rerun with
    ``derive_seed(seed, "resample", i)``.
    """
    n = grid_h * grid_w
    s = seed
    for i in range(max_resamples + 1):
        try:
            return make_mask(strategy, grid_h, grid_w, ratio, s, span_cfg, block_cfg)
        except MaskBudgetError as err:
            if len(err.partial) >= min_fraction * ratio * n and len(err.partial) > 0:
                return err.partial
        s = derive_seed(seed, "resample", i)
    raise MaskBudgetError(f"no usable {strategy} mask after {max_resamples} resamples", None)


def mask_to_bitmap(mask, patch_size=4):
    """Single-channel image: 0 on masked patches, 1 elsewhere."""
    bits = (~mask.as_bool()).astype(np.float64).reshape(mask.grid_h, mask.grid_w)
    big = np.kron(bits, np.ones((patch_size, patch_size)))
    return ImageBuf(big[:, :, None])


def apply_mask(img, mask, patch_size=4, fill=0.0):
    """Image with masked patches painted ``fill`` (mask previews)."""
    keep = mask_to_bitmap(mask, patch_size).data
    return ImageBuf(img.data * keep + fill * (1.0 - keep))

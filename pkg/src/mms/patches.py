"""Image buffers, patch grids and per-patch target normalisation.

Patch ``k`` is grid cell ``(k // grid_w, k % grid_w)``. Inside a patch the
pixels are flattened in ``(row, col, channel)`` order, so a 4x4 RGB patch is
a 48-vector ``[r00, g00, b00, r01, g01, b01, ...]``. The same ordering is
used by masks, positional embeddings and reconstructions.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .errors import GeometryError

IMAGE_HEIGHT = 32
IMAGE_WIDTH = 128
PATCH_SIZE = 4
NORM_EPS = 1e-6


@dataclass(eq=False)
class ImageBuf:
    """``[height, width, channels]`` float image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise GeometryError(f"image must be HxWx1 or HxWx3, got {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.data = arr

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def to_rgb(self):
        if self.channels == 3:
            return self
        return ImageBuf(np.repeat(self.data, 3, axis=2))


@dataclass(eq=False)
class PatchGrid:
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int
    patches: Tensor
    per_patch_mean: np.ndarray = field(default=None)
    per_patch_std: np.ndarray = field(default=None)

    @property
    def num_patches(self):
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    def validate(self):
        n, d = self.num_patches, self.patch_dim
        if self.patches.shape != (n, d):
            raise GeometryError(
                f"patch tensor {self.patches.shape} does not match grid {self.grid_h}x{self.grid_w}, dim {d}")
        return self


def patchify(img, patch_size=PATCH_SIZE):
    """Split an image into non-overlapping ``patch_size`` squares (row-major)."""
    h, w, c = img.data.shape
    p = int(patch_size)
    if p < 1 or h % p or w % p:
        raise GeometryError(f"{h}x{w} image is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    blocks = img.data.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(gh, gw, p, c, Tensor(blocks.reshape(gh * gw, p * p * c)))


def depatchify(grid):
    """Inverse of :func:`patchify`."""
    grid.validate()
    p, c = grid.patch_size, grid.channels
    blocks = grid.patches.data.reshape(grid.grid_h, grid.grid_w, p, p, c)
    img = blocks.transpose(0, 2, 1, 3, 4).reshape(grid.grid_h * p, grid.grid_w * p, c)
    return ImageBuf(img.copy())


def patch_stats(patches, eps=NORM_EPS):
    """Per-row mean and ``sqrt(var + eps)`` (population variance)."""
    x = np.asarray(patches, dtype=np.float64)
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    return mean, np.sqrt(var + eps)


def normalize_targets(grid, eps=NORM_EPS):
    """Per-patch standardisation of the reconstruction targets.

    Returns a new grid whose patches are normalised and whose
    ``per_patch_mean``/``per_patch_std`` hold the statistics for inversion.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grid.validate()
    mean, std = patch_stats(grid.patches.data, eps)
    normed = (grid.patches.data - mean[:, None]) / std[:, None]
    return replace(grid, patches=Tensor(normed), per_patch_mean=mean, per_patch_std=std)


def denormalize_patches(patches, mean, std):
    x = np.asarray(patches, dtype=np.float64)
    return x * np.asarray(std)[:, None] + np.asarray(mean)[:, None]


def denormalize_targets(grid):
    if grid.per_patch_mean is None:
        raise GeometryError("grid carries no normalisation statistics")
    raw = denormalize_patches(grid.patches.data, grid.per_patch_mean, grid.per_patch_std)
    return replace(grid, patches=Tensor(raw), per_patch_mean=None, per_patch_std=None)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centres (``align_corners=False``).

    Output pixel ``(i, j)`` samples source coordinate
    ``y = (i + 0.5) * H / out_h - 0.5`` (same for x), clamped to
    ``[0, H - 1]``, and blends the four neighbouring pixels linearly.
    """
    if out_h < 1 or out_w < 1:
        raise GeometryError("output dimensions must be >= 1")
    src = img.data
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return ImageBuf(src.copy())

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return ImageBuf(np.clip(out, 0.0, 1.0))


def prepare_image(img, height=IMAGE_HEIGHT, width=IMAGE_WIDTH):
    """Replicate grey to RGB and resize to the model's input size."""
    img = img.to_rgb()
    if (img.height, img.width) != (height, width):
        img = resize_bilinear(img, height, width)
    return img

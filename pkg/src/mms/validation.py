"""Input validation helpers shared by the estimators and the CLI."""

import numpy as np
from sklearn.utils.validation import check_array

from .patches import ImageBuf, prepare_image


def check_images(X, height=32, width=128):
    """Coerce ``X`` into a list of RGB :class:`ImageBuf` at the model size.

    Accepts a sequence of ImageBufs or an array shaped ``[n, H, W]`` or
    ``[n, H, W, C]`` with values in [0, 1]. Other sizes are resized.
    """
    if isinstance(X, ImageBuf):
        X = [X]
    if isinstance(X, np.ndarray):
        if X.ndim not in (3, 4):
            raise ValueError(f"expected an image stack [n, H, W(, C)], got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("images contain NaN or infinite values")
        X = [ImageBuf(x) for x in X]
    out = []
    for img in X:
        if not isinstance(img, ImageBuf):
            img = ImageBuf(np.asarray(img, dtype=np.float64))
        out.append(prepare_image(img, height, width))
    if not out:
        raise ValueError("at least one image is required")
    return out


def images_to_array(images):
    return np.stack([img.data for img in images])


def check_features(X):
    """2-D float feature matrix (sklearn's ``check_array`` semantics)."""
    return check_array(X, dtype=np.float64, ensure_2d=True)


def check_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y

"""Multi-masking-strategy masked image modeling for text-line images, on a
small numpy autodiff engine."""

from .checkpoint import VERSION as CHECKPOINT_VERSION
from .estimators import ColumnProbe, MMSPretrainer
from .masking import MaskSet, block_mask, multi_mask, random_mask, span_mask
from .model import ModelDims, init_params, mms_forward
from .patches import ImageBuf, patchify
from .synth import SynthConfig, make_dataset, render_word
from .train import TrainConfig, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "CHECKPOINT_VERSION", "ColumnProbe", "ImageBuf", "MMSPretrainer", "MaskSet", "ModelDims",
    "SynthConfig", "TrainConfig", "block_mask", "init_params", "lr_at", "make_dataset",
    "mms_forward", "multi_mask", "patchify", "random_mask", "render_word", "span_mask",
    "train_loop", "__version__",
]

"""scikit-learn style wrappers: the pre-trainer as a transformer and the
column probe as a classifier."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .evaluation import assert_frozen, build_eval_sets, column_features, score_eval_sets
from .masking import STRATEGIES
from .model import MaskSet, encode_visible
from .patches import patchify
from .rng import derive_seed, uniform_block
from .train import OptState, TrainConfig, adamw_step, load_params, lr_at, train_loop
from .validation import check_features, check_images, check_labels


class MMSPretrainer(TransformerMixin, BaseEstimator):
    """Masked-image-modeling pre-training with any subset of the three
    masking branches; ``transform`` returns frozen encoder features.

    Parameters mirror :class:`mms.train.TrainConfig`. ``pooling`` selects the
    feature layout returned by ``transform``: ``"columns"`` (per patch column,
    flattened), ``"cls"`` or ``"mean"``.
    """

    def __init__(self, preset="tiny-desk", strategies=STRATEGIES, ratio_random=0.75,
                 ratio_block=0.5, ratio_span=0.5, span_max=8, epochs=3, batch_size=32,
                 base_lr=1e-3, warmup_steps=200, weight_decay=0.05, precision="float64",
                 pooling="columns", random_state=0):
        self.preset = preset
        self.strategies = strategies
        self.ratio_random = ratio_random
        self.ratio_block = ratio_block
        self.ratio_span = ratio_span
        self.span_max = span_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.precision = precision
        self.pooling = pooling
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            preset=self.preset, strategies=tuple(self.strategies), ratio_random=self.ratio_random,
            ratio_block=self.ratio_block, ratio_span=self.ratio_span, span_max=self.span_max,
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
            warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
            precision=self.precision, seed=self.random_state).validate()

    def fit(self, X, y=None, out_dir=None):
        images = check_images(X)
        params, opt, history = train_loop(self._config(), images, out_dir=out_dir)
        self.params_ = params
        self.opt_state_ = opt
        self.history_ = history
        self.n_steps_ = len(history)
        return self

    @classmethod
    def from_checkpoint(cls, path, **kwargs):
        est = cls(**kwargs)
        est.params_ = load_params(path)
        est.history_ = []
        est.n_steps_ = 0
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        images = check_images(X)
        if self.pooling == "columns":
            feats = column_features(self.params_, images)
            return feats.reshape(len(images), -1)
        if self.pooling not in ("cls", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        out = []
        for img in images:
            grid = patchify(img)
            feats, _ = encode_visible(self.params_, grid, MaskSet(grid.grid_h, grid.grid_w, (), "random", 0.0))
            out.append(feats.data[0] if self.pooling == "cls" else feats.data[1:].mean(axis=0))
        return np.stack(out)

    def score(self, X, y=None):
        """Mean reconstruction PSNR over the three default frozen eval sets."""
        check_is_fitted(self, "params_")
        images = check_images(X)
        sets = build_eval_sets(len(images), self.random_state)
        return float(np.mean(list(score_eval_sets(self.params_, images, sets).values())))


class ColumnProbe(ClassifierMixin, BaseEstimator):
    """Softmax-linear classifier trained with AdamW on the package's autodiff.

    Inputs are standardised with training-set statistics (a fixed affine map,
    so the probe stays linear in the features).
    """

    def __init__(self, lr=1e-2, epochs=30, batch_size=1024, weight_decay=1e-4, random_state=0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y, frozen=None):
        """``frozen`` optionally names an :class:`MmsParams` that must receive
        no gradient while the head trains."""
        X = check_features(X)
        y = check_labels(y, X.shape[0])
        self.classes_, yi = np.unique(y, return_inverse=True)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0) + 1e-8
        Z = (X - self.mean_) / self.scale_
        n, d = Z.shape
        k = len(self.classes_)
        bs = min(self.batch_size, n)
        per_epoch = -(-n // bs)
        cfg = TrainConfig(base_lr=self.lr, weight_decay=self.weight_decay, warmup_steps=0,
                          total_steps=max(1, self.epochs * per_epoch))
        params = {"head.w": ad.Tensor(np.zeros((d, k)), requires_grad=True),
                  "head.b": ad.Tensor(np.zeros(k), requires_grad=True)}
        opt = OptState.zeros_like(params)
        step = 0
        self.loss_curve_ = []
        with ad.precision("float64"):
            for epoch in range(self.epochs):
                order = np.argsort(uniform_block(derive_seed(self.random_state, "probe", epoch), n),
                                   kind="stable")
                total = 0.0
                for start in range(0, n, bs):
                    idx = order[start:start + bs]
                    with ad.Tape():
                        logits = ad.linear(ad.Tensor(Z[idx]), params["head.w"], params["head.b"])
                        loss = ad.cross_entropy(logits, yi[idx])
                        grads = ad.backward(loss)
                    if frozen is not None:
                        assert_frozen(grads, frozen)
                    g = {name: grads[t] for name, t in params.items() if t in grads}
                    params, opt = adamw_step(params, g, opt, lr_at(step, cfg), cfg,
                                             decay=lambda name: name == "head.w")
                    step += 1
                    total += loss.item() * len(idx)
                self.loss_curve_.append(total / n)
        self.coef_ = params["head.w"].data
        self.intercept_ = params["head.b"].data
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        Z = (check_features(X) - self.mean_) / self.scale_
        return Z @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

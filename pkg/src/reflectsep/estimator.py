"""scikit-learn style wrapper around the training loop and separator."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluation, imaging, networks, training
from .networks import Variant
from .synthesis import ImageSet


def check_images(X, name="X", size=None):
    """Validate an image stack and return it as float64 (n, H, W, 3).

    Accepts (H, W, 3) for a single image. Values must be finite and in [0, 1].
    With ``size`` given, images of another size are bilinearly resized.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    if size is not None and arr.shape[1:3] != (size, size):
        arr = np.stack([imaging.resize_bilinear(im, size, size) for im in arr])
    return arr


class ReflectionSeparator(TransformerMixin, BaseEstimator):
    """Adversarial reflection separator.

    ``fit(X, y)`` trains on transmission-category images ``X`` and
    reflection-category images ``y`` (both (n, H, W, 3) in [0, 1]); observations
    are synthesized on the fly. Variants ``b1``/``b2``/``b3`` train with paired
    supervision, ``mask`` trains weakly on a half split of each category.

    ``transform`` returns the transmission and reflection estimates stacked on
    the channel axis, (n, S, S, 6); ``predict`` returns the transmission
    estimate alone; ``score`` is the mean PSNR of ``predict`` against given
    transmissions.
    """

    def __init__(self, variant="b3", kinds="all", steps=1000, batch_size=16,
                 learning_rate=2e-4, beta1=0.5, beta2=0.999, lambda1=100.0, lambda2=100.0,
                 image_size=128, width_div=1, random_state=0):
        self.variant = variant
        self.kinds = kinds
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.image_size = image_size
        self.width_div = width_div
        self.random_state = random_state

    def _config(self):
        variant = Variant.parse(self.variant)
        mode = training.Mode.WEAK if variant is Variant.MASK else training.Mode.SUPERVISED
        seed = 0 if self.random_state is None else int(self.random_state)
        return training.TrainConfig(
            variant=variant, mode=mode, kinds=self.kinds, steps=self.steps,
            batch_size=self.batch_size, learning_rate=self.learning_rate, beta1=self.beta1,
            beta2=self.beta2, lambda1=self.lambda1, lambda2=self.lambda2, seed=seed,
            checkpoint_every=self.steps, image_size=self.image_size, width_div=self.width_div,
        )

    def fit(self, X, y):
        config = self._config()
        X = check_images(X, "X")
        y = check_images(y, "y")
        history = []
        state = training.fit(config, ImageSet.from_arrays(X, "t"), ImageSet.from_arrays(y, "r"),
                             on_step=lambda step, rep: history.append(rep.values()))
        self.model_ = state.model
        self.state_ = state
        self.loss_history_ = history
        self.n_steps_ = state.step
        return self

    def separate(self, Y):
        """Dict of estimates for observations ``Y``: t_hat, r_hat and per-variant extras."""
        check_is_fitted(self, "model_")
        Y = check_images(Y, "Y", self.model_.image_size)
        return evaluation.as_separator(self.model_)(Y)

    def transform(self, Y):
        out = self.separate(Y)
        return np.concatenate([out["t_hat"], out["r_hat"]], axis=-1)

    def predict(self, Y):
        return self.separate(Y)["t_hat"]

    def score(self, Y, T):
        T = check_images(T, "T", self.model_.image_size if hasattr(self, "model_") else None)
        vals = [imaging.psnr(t, p) for t, p in zip(T, self.predict(Y))]
        finite = [v for v in vals if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf

    def save(self, path):
        check_is_fitted(self, "state_")
        return training.save_checkpoint(self.state_, path)

    @property
    def n_parameters_(self):
        check_is_fitted(self, "model_")
        return networks.count_parameters(self.model_)

"""scikit-learn compatible wrappers around the preprocessing steps and the model.

The transformers accept a batch of images (an N x H x W x C array or a list of
arrays of different sizes) and are stateless, so ``fit`` only validates its
parameters. :class:`LesionSegmenter` trains one binary DeepLabv3+ model.

    >>> from sklearn.pipeline import make_pipeline
    >>> prep = make_pipeline(FundusCropper(), LabClaheEnhancer(), SquareResizer(side=512))
"""

from __future__ import annotations

import cv2
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import LesionClass
from .exceptions import ConfigError
from .imaging.clahe import DEFAULT_CLIP_LIMIT, DEFAULT_TILE_GRID, enhance_contrast_lab
from .imaging.geometry import DEFAULT_BACKGROUND_THRESHOLD, crop_fundus, resize_pair
from .metrics import confusion, ratio_metrics
from .model import ModelConfig, binarize, build_model, forward
from .training import TrainConfig, fit_arrays
from .validation import check_image


def _as_batch(X):
    if isinstance(X, np.ndarray) and X.ndim == 4:
        return list(X)
    if isinstance(X, np.ndarray) and X.ndim in (2, 3):
        raise ConfigError("expected a batch of images; wrap a single image in a list")
    return list(X)


def _stack_if_uniform(items):
    shapes = {np.shape(i) for i in items}
    return np.stack(items) if len(shapes) == 1 else items


class _StatelessTransformer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        self._check_params()
        self.is_fitted_ = True
        return self

    def _check_params(self):
        pass

    def transform(self, X):
        self._check_params()
        return _stack_if_uniform([self._transform_one(check_image(x)) for x in _as_batch(X)])

    def __sklearn_is_fitted__(self):
        return True


class FundusCropper(_StatelessTransformer):
    """Crops each image to the bounding box of its bright (fundus) pixels."""

    def __init__(self, background_threshold=DEFAULT_BACKGROUND_THRESHOLD, margin=0):
        self.background_threshold = background_threshold
        self.margin = margin

    def _transform_one(self, img):
        return crop_fundus(img, self.background_threshold, self.margin).image


class LabClaheEnhancer(_StatelessTransformer):
    """CLAHE on the L channel of the LAB representation of each RGB image."""

    def __init__(self, clip_limit=DEFAULT_CLIP_LIMIT, tile_grid=DEFAULT_TILE_GRID):
        self.clip_limit = clip_limit
        self.tile_grid = tile_grid

    def _check_params(self):
        if self.clip_limit <= 0:
            raise ConfigError("clip_limit must be positive")

    def _transform_one(self, img):
        return enhance_contrast_lab(img, self.clip_limit, self.tile_grid)


class SquareResizer(_StatelessTransformer):
    def __init__(self, side=512):
        self.side = side

    def _transform_one(self, img):
        return resize_pair(img, None, self.side)[0]


class LesionSegmenter(ClassifierMixin, BaseEstimator):
    """Binary per-pixel lesion segmenter (DeepLabv3+ with a sigmoid head).

    ``X`` is an N x H x W x 3 batch (uint8 or floats in [0, 1]) and ``y`` an
    N x H x W batch of {0, 1} masks. Images are resized to ``image_size`` for
    the network and probabilities are resized back to the input resolution.
    ``score`` returns the pooled foreground IoU.
    """

    def __init__(self, lesion="EX", backbone="efficientnet-b0", pretrained=True, output_stride=16,
                 aspp_rates=(6, 12, 18), aspp_channels=256, decoder_channels=256,
                 decoder_low_level_channels=48, tiny_width=8, dropout=0.1, image_size=512,
                 batch_size=4, max_epochs=30, learning_rate=1e-4, early_stop_patience=5,
                 validation_fraction=0.2, threshold=0.5, random_state=0):
        self.lesion = lesion
        self.backbone = backbone
        self.pretrained = pretrained
        self.output_stride = output_stride
        self.aspp_rates = aspp_rates
        self.aspp_channels = aspp_channels
        self.decoder_channels = decoder_channels
        self.decoder_low_level_channels = decoder_low_level_channels
        self.tiny_width = tiny_width
        self.dropout = dropout
        self.image_size = image_size
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            input_side=self.image_size, backbone=self.backbone, pretrained=self.pretrained,
            output_stride=self.output_stride, aspp_rates=tuple(self.aspp_rates),
            aspp_channels=self.aspp_channels, decoder_channels=self.decoder_channels,
            decoder_low_level_channels=self.decoder_low_level_channels, dropout=self.dropout,
            tiny_width=self.tiny_width,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            image_size=self.image_size, batch_size=self.batch_size, max_epochs=self.max_epochs,
            learning_rate=self.learning_rate, early_stop_patience=self.early_stop_patience,
            seed=self.random_state,
        )

    def _resize_batch(self, X, y=None):
        imgs, masks = [], []
        for i, x in enumerate(X):
            img, mask = resize_pair(x, None if y is None else y[i], self.image_size)
            imgs.append(img)
            masks.append(mask)
        return np.stack(imgs), (None if y is None else np.stack(masks))

    def fit(self, X, y, X_val=None, y_val=None):
        LesionClass.parse(self.lesion)
        X, y = np.asarray(X), np.asarray(y)
        if X.ndim != 4 or y.ndim != 3 or len(X) != len(y):
            raise ConfigError("expected X of shape (N, H, W, 3) and y of shape (N, H, W)")
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * len(X)))) if len(X) > 1 else 0
            order = np.random.default_rng(self.random_state).permutation(len(X))
            if n_val:
                X_val, y_val = X[order[:n_val]], y[order[:n_val]]
                X, y = X[order[n_val:]], y[order[n_val:]]
            else:
                X_val, y_val = X, y
        x_tr, y_tr = self._resize_batch(X, y)
        x_va, y_va = self._resize_batch(np.asarray(X_val), np.asarray(y_val))
        self.model_ = build_model(self._model_config(), seed=self.random_state)
        self.model_, self.history_ = fit_arrays(self.model_, x_tr, y_tr, x_va, y_va, self._train_config())
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        """Foreground probability per pixel, shape (N, H, W)."""
        check_is_fitted(self, "model_")
        X = np.asarray(X)
        x, _ = self._resize_batch(X)
        probs = forward(self.model_, x)[..., 0]
        h, w = X.shape[1:3]
        if (h, w) == probs.shape[1:]:
            return probs
        return np.stack([cv2.resize(p, (w, h), interpolation=cv2.INTER_LINEAR) for p in probs])

    def predict(self, X):
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        c = confusion(pred.reshape(-1, pred.shape[-1]), np.asarray(y).reshape(-1, pred.shape[-1]))
        return ratio_metrics(c).iou

"""scikit-learn style wrappers around the functional core.

``SegmentationNet`` is a fit/predict estimator over image batches;
``ContrastivePretrainer`` is fit-only and hands its encoder weights to
fresh ``SegmentationNet`` instances; the selector classes expose the
acquisition strategies behind a uniform ``select`` call. Construction
stores hyperparameters verbatim, so ``get_params``/``set_params``/
``clone`` behave as sklearn expects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import net as _net
from .acquisition import (
    AcquisitionConfig,
    build_pool_state,
    coreset_select,
    entropy_select,
    greedy_select,
    random_select,
)
from .contrastive import PretrainConfig, pretrain, transfer
from .data import Dataset
from .experiment import miou
from .rng import Rng
from .validation import check_images, check_masks, check_paired


def _wrap_dataset(X: np.ndarray, y: np.ndarray | None, n_classes: int) -> Dataset:
    n = X.shape[0]
    if y is None:
        y = np.zeros(X.shape[:3], dtype=np.uint8)
    return Dataset(
        images=X,
        masks=y.astype(np.uint8),
        train_indices=list(range(n)),
        test_indices=[],
        class_names=[f"class_{c}" for c in range(n_classes)],
    )


class SegmentationNet(BaseEstimator):
    """Encoder-decoder pixel classifier with weighted cross-entropy.

    ``fit(X, y)`` trains from ``init_weights`` when given (each call
    copies them, so one pretrained checkpoint can seed many fits), else
    from a seeded He initialization. ``transform`` returns the pooled
    decoder features used as image embeddings.
    """

    def __init__(
        self,
        enc1_channels=8,
        enc2_channels=16,
        dec_channels=8,
        skip_connection=True,
        n_classes=None,
        epochs=50,
        batch_size=16,
        learning_rate=1e-3,
        lr_drop_epoch=25,
        lr_drop_factor=0.1,
        rmsprop_decay=0.9,
        rmsprop_eps=1e-8,
        weight_decay=1e-8,
        flip_probability=0.5,
        init_weights=None,
        seed=0,
    ):
        self.enc1_channels = enc1_channels
        self.enc2_channels = enc2_channels
        self.dec_channels = dec_channels
        self.skip_connection = skip_connection
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_epoch = lr_drop_epoch
        self.lr_drop_factor = lr_drop_factor
        self.rmsprop_decay = rmsprop_decay
        self.rmsprop_eps = rmsprop_eps
        self.weight_decay = weight_decay
        self.flip_probability = flip_probability
        self.init_weights = init_weights
        self.seed = seed

    def _net_config(self, n_classes: int) -> _net.NetConfig:
        return _net.NetConfig(
            in_channels=1,
            enc1_channels=self.enc1_channels,
            enc2_channels=self.enc2_channels,
            dec_channels=self.dec_channels,
            n_classes=n_classes,
            skip_connection=self.skip_connection,
        )

    def _train_config(self) -> _net.TrainConfig:
        return _net.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_drop_epoch=self.lr_drop_epoch,
            lr_drop_factor=self.lr_drop_factor,
            rmsprop_decay=self.rmsprop_decay,
            rmsprop_eps=self.rmsprop_eps,
            weight_decay=self.weight_decay,
            flip_probability=self.flip_probability,
            seed=self.seed,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y)
        check_paired(X, y)
        n_classes = self.n_classes if self.n_classes else int(y.max()) + 1
        config = self._net_config(n_classes)
        if self.init_weights is not None:
            init = self.init_weights
            if init.head_w is None:
                init = transfer(init, config, Rng(self.seed).derive("init"))
        else:
            init = _net.init_params(config, Rng(self.seed).derive("init"))
        dataset = _wrap_dataset(X, y, n_classes)
        self.params_, self.loss_history_ = _net.train(
            init, dataset, list(range(X.shape[0])), self._train_config()
        )
        self.n_classes_ = n_classes
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this SegmentationNet instance is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_images(X)
        out = np.empty(X.shape[:3] + (self.n_classes_,), dtype=np.float32)
        for i in range(X.shape[0]):
            out[i] = _net.predict(self.params_, X[i])
        return out

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=-1)

    def transform(self, X) -> np.ndarray:
        """Per-image embeddings (average-pooled decoder features)."""
        self._check_fitted()
        X = check_images(X)
        out = np.empty((X.shape[0], self.dec_channels), dtype=np.float32)
        for i in range(X.shape[0]):
            out[i] = _net.image_embedding(self.params_, X[i])
        return out

    def score(self, X, y) -> float:
        """Mean IoU on (X, y)."""
        y = check_masks(y, getattr(self, "n_classes_", None))
        _, mean_iou = miou(self.predict(X), y, self.n_classes_)
        return mean_iou


class ContrastivePretrainer(BaseEstimator):
    """Fits the encoder-decoder on unlabelled images with InfoNCE.

    After ``fit``, ``encoder_params_`` holds the conv weights (no
    segmentation head); ``segmentation_init(n_classes)`` attaches a
    freshly seeded head for downstream training.
    """

    def __init__(
        self,
        enc1_channels=8,
        enc2_channels=16,
        dec_channels=8,
        skip_connection=True,
        temperature=0.5,
        epochs=100,
        batch_size=32,
        learning_rate=1e-3,
        crop_area_min=0.6,
        crop_area_max=1.0,
        flip_probability=0.5,
        brightness_jitter=0.2,
        hidden_dim=16,
        proj_dim=8,
        seed=0,
    ):
        self.enc1_channels = enc1_channels
        self.enc2_channels = enc2_channels
        self.dec_channels = dec_channels
        self.skip_connection = skip_connection
        self.temperature = temperature
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.crop_area_min = crop_area_min
        self.crop_area_max = crop_area_max
        self.flip_probability = flip_probability
        self.brightness_jitter = brightness_jitter
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X)
        config = _net.NetConfig(
            in_channels=1,
            enc1_channels=self.enc1_channels,
            enc2_channels=self.enc2_channels,
            dec_channels=self.dec_channels,
            n_classes=1,
            skip_connection=self.skip_connection,
        )
        cfg = PretrainConfig(
            temperature=self.temperature,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            crop_area_min=self.crop_area_min,
            crop_area_max=self.crop_area_max,
            flip_probability=self.flip_probability,
            brightness_jitter=self.brightness_jitter,
            hidden_dim=self.hidden_dim,
            proj_dim=self.proj_dim,
            seed=self.seed,
        )
        dataset = _wrap_dataset(X, None, 1)
        self.encoder_params_, self.loss_history_ = pretrain(dataset, config, cfg)
        return self

    def transform(self, X) -> np.ndarray:
        """Embeddings from the pretrained encoder-decoder."""
        if not hasattr(self, "encoder_params_"):
            raise NotFittedError("this ContrastivePretrainer instance is not fitted yet")
        X = check_images(X)
        out = np.empty((X.shape[0], self.dec_channels), dtype=np.float32)
        for i in range(X.shape[0]):
            out[i] = _net.image_embedding(self.encoder_params_, X[i])
        return out

    def segmentation_init(self, n_classes: int, seed: int | None = None) -> _net.NetParams:
        if not hasattr(self, "encoder_params_"):
            raise NotFittedError("this ContrastivePretrainer instance is not fitted yet")
        config = _net.NetConfig(
            in_channels=1,
            enc1_channels=self.enc1_channels,
            enc2_channels=self.enc2_channels,
            dec_channels=self.dec_channels,
            n_classes=n_classes,
            skip_connection=self.skip_connection,
        )
        rng = Rng(self.seed if seed is None else seed).derive("init")
        return transfer(self.encoder_params_, config, rng)


def _params_of(model) -> _net.NetParams:
    if isinstance(model, _net.NetParams):
        return model
    if hasattr(model, "params_"):
        return model.params_
    raise TypeError("expected a fitted SegmentationNet or NetParams")


class RarenessAwareSelector(BaseEstimator):
    """Greedy selection by rareness + entropy + diversity."""

    def __init__(self, use_rareness=True, use_entropy=True, use_diversity=True, aggregator="max"):
        self.use_rareness = use_rareness
        self.use_entropy = use_entropy
        self.use_diversity = use_diversity
        self.aggregator = aggregator

    def select(self, model, X, labelled, unlabelled, k):
        params = _params_of(model)
        X = check_images(X)
        cfg = AcquisitionConfig(
            strategy="rareness_aware",
            use_rareness=self.use_rareness,
            use_entropy=self.use_entropy,
            use_diversity=self.use_diversity,
            aggregator=self.aggregator,
            budget=k,
        )
        pool = build_pool_state(params, X, list(labelled), list(unlabelled))
        picks, _, _ = greedy_select(params, X, pool, cfg, k)
        return picks


class RandomSelector(BaseEstimator):
    def __init__(self, seed=0):
        self.seed = seed

    def select(self, model, X, labelled, unlabelled, k, rng=None):
        from .acquisition import PoolState

        pool = PoolState(labelled=sorted(labelled), unlabelled=sorted(unlabelled))
        return random_select(pool, k, rng if rng is not None else Rng(self.seed).derive("select"))


class EntropySelector(BaseEstimator):
    def __init__(self, aggregator="max"):
        self.aggregator = aggregator

    def select(self, model, X, labelled, unlabelled, k):
        from .acquisition import PoolState

        params = _params_of(model)
        X = check_images(X)
        pool = PoolState(labelled=sorted(labelled), unlabelled=sorted(unlabelled))
        return entropy_select(params, X, pool, k, self.aggregator)


class CoreSetSelector(BaseEstimator):
    def select(self, model, X, labelled, unlabelled, k):
        params = _params_of(model)
        X = check_images(X)
        pool = build_pool_state(params, X, list(labelled), list(unlabelled))
        return coreset_select(pool, k)

"""scikit-learn style wrappers around the patch classifier and the window extractor."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import inference, resnet, trainer
from .errors import ConfigurationError, ContractViolation
from .sampler import EXTENT, extract_batch, valid_center_mask


def check_patches(X, n_channels=None):
    """Validate a patch stack ``(n, channels, 15, 15)`` of finite floats."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_all_finite=True)
    if X.ndim != 4 or X.shape[2:] != (EXTENT, EXTENT):
        raise ContractViolation(f"expected patches shaped (n, channels, {EXTENT}, {EXTENT}), got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ContractViolation(f"expected {n_channels} channels, got {X.shape[1]}")
    return X


def check_labels(y, n):
    y = np.asarray(y).ravel()
    if len(y) != n:
        raise ContractViolation(f"{n} patches but {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ContractViolation("labels must be 0 (clear) or 1 (cloud_shadow)")
    return y.astype(np.int64)


class ResNetPatchClassifier(ClassifierMixin, BaseEstimator):
    """Binary clear vs cloud_shadow classifier for 15x15 multi-band patches.

    Without an explicit validation set, ``validation_fraction`` of the
    training patches are held out at random to drive learning-rate decay
    and checkpoint selection.
    """

    def __init__(self, depth_param_n=3, stage_widths=(16, 32, 64), batch_size=256, lr_initial=0.1,
                 lr_decay_factor=10.0, plateau_patience=10, plateau_min_delta=1e-4, momentum=0.9,
                 weight_decay=5e-4, dropout_keep=0.5, max_epochs=120, min_epochs=80,
                 validation_fraction=0.25, threshold=0.5, dtype="float32", random_state=0):
        self.depth_param_n = depth_param_n
        self.stage_widths = stage_widths
        self.batch_size = batch_size
        self.lr_initial = lr_initial
        self.lr_decay_factor = lr_decay_factor
        self.plateau_patience = plateau_patience
        self.plateau_min_delta = plateau_min_delta
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.dropout_keep = dropout_keep
        self.max_epochs = max_epochs
        self.min_epochs = min_epochs
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.dtype = dtype
        self.random_state = random_state

    def _configs(self, n_channels):
        net = resnet.NetworkConfig(depth_param_n=self.depth_param_n, stage_widths=tuple(self.stage_widths),
                                   input_channels=n_channels, dropout_keep=self.dropout_keep)
        seed = 0 if self.random_state is None else int(self.random_state)
        cfg = trainer.TrainConfig(
            batch_size=self.batch_size, lr_initial=self.lr_initial, lr_decay_factor=self.lr_decay_factor,
            plateau_patience=self.plateau_patience, plateau_min_delta=self.plateau_min_delta,
            momentum=self.momentum, weight_decay=self.weight_decay, dropout_keep=self.dropout_keep,
            max_epochs=self.max_epochs, min_epochs=min(self.min_epochs, self.max_epochs), seed=seed,
            dtype=self.dtype)
        return net, cfg

    def fit(self, X, y, X_val=None, y_val=None, out_dir=None):
        X = check_patches(X)
        y = check_labels(y, len(X))
        inference.check_threshold(self.threshold)
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ConfigurationError("validation_fraction must lie in (0, 1)")
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val, tr = order[:n_val], order[n_val:]
            X, X_val, y, y_val = X[tr], X[val], y[tr], y[val]
        else:
            X_val = check_patches(X_val, X.shape[1])
            y_val = check_labels(y_val, len(X_val))
        net, cfg = self._configs(X.shape[1])
        result = trainer.train_arrays(X, y, X_val, y_val, net, cfg, out_dir=out_dir)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.n_channels_in_ = X.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, path, threshold=0.5):
        params = resnet.load_checkpoint(path)
        c = params.config
        est = cls(depth_param_n=c.depth_param_n, stage_widths=c.stage_widths,
                  dropout_keep=c.dropout_keep, threshold=threshold)
        est.params_ = params
        est.history_ = []
        est.best_epoch_ = None
        est.classes_ = np.array([0, 1])
        est.n_channels_in_ = c.input_channels
        return est

    def save(self, path):
        check_is_fitted(self, "params_")
        resnet.save_checkpoint(self.params_, path)

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_patches(X, self.n_channels_in_).astype(self.params_.dtype, copy=False)
        p = resnet.predict_proba(self.params_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        # a tie at the threshold goes to cloud_shadow
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def predict_scene(self, scene, bands=None, tile_size=2048, threads=1):
        """Full-scene MaskRaster with confidence plane."""
        check_is_fitted(self, "params_")
        cfg = inference.InferenceConfig(threshold=self.threshold, bands=bands, tile_size=tile_size,
                                        threads=threads)
        return inference.infer_scene(scene, cfg, params=self.params_)


class LocalRegionExtractor(TransformerMixin, BaseEstimator):
    """Turns a BandStack into the stack of every valid 15x15 window, row-major."""

    def __init__(self, bands=None):
        self.bands = bands

    def fit(self, scene, y=None):
        stack = scene.select(self.bands) if self.bands is not None else scene
        self.bands_ = stack.bands
        return self

    def centers(self, scene):
        return np.argwhere(valid_center_mask(scene.nodata))

    def transform(self, scene):
        check_is_fitted(self, "bands_")
        c = self.centers(scene)
        if not len(c):
            return np.empty((0, len(self.bands_), EXTENT, EXTENT), dtype=np.float32)
        return extract_batch(scene, c[:, 0], c[:, 1], self.bands_)

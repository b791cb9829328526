"""Estimator-style wrappers over the functional pipeline.

These follow the fit/transform/predict conventions (constructor takes only
hyperparameters, get_params/set_params work, fitted state lands in
trailing-underscore attributes) so the decomposition stages can slot into
pipelines and grid searches alongside standard estimators.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .bench import compute_auc, physics_residual_score
from .illumination import fit_sh_coefficients
from .nn import ModelConfig, TrainConfig, score_with_model, train
from .pipeline import decompose
from .raster import Raster
from .retinex import DEFAULT_SIGMAS, RetinexConfig, multi_scale_retinex
from .validation import check_image_array

__all__ = [
    "RetinexTextureExtractor",
    "IlluminationDecomposer",
    "PhysicsResidualScorer",
    "SpecularInconsistencyClassifier",
]


def _as_raster(x, name):
    if isinstance(x, Raster):
        return x
    return Raster(check_image_array(x, name))


class RetinexTextureExtractor(BaseEstimator, TransformerMixin):
    """Multi-Scale Retinex albedo as a stateless transformer.

    transform maps an (H, W, C) image to its normalized albedo array.
    """

    def __init__(self, sigmas=DEFAULT_SIGMAS, epsilon=1e-4,
                 normalization="exp-minmax"):
        self.sigmas = sigmas
        self.epsilon = epsilon
        self.normalization = normalization

    def _config(self):
        return RetinexConfig(sigmas=tuple(self.sigmas), epsilon=self.epsilon,
                             normalization=self.normalization)

    def fit(self, X, y=None):
        self._config()  # validate hyperparameters
        self.n_features_in_ = None
        return self

    def transform(self, X):
        image = _as_raster(X, "X")
        return multi_scale_retinex(image, self._config()).albedo.pixels


class IlluminationDecomposer(BaseEstimator):
    """Full decomposition bound to rasterized geometry buffers.

    fit(X, buffers=...) runs the pipeline and stores the Decomposition;
    transform(X) returns the image-space maps stacked along channels in the
    order texture, direct, specular.
    """

    def __init__(self, robust=True, trim_fraction=0.10, uv_resolution=128,
                 texture_source="msr"):
        self.robust = robust
        self.trim_fraction = trim_fraction
        self.uv_resolution = uv_resolution
        self.texture_source = texture_source

    def fit(self, X, y=None, buffers=None, provided_albedo=None):
        if buffers is None:
            raise ValueError("IlluminationDecomposer.fit needs buffers=")
        image = _as_raster(X, "X")
        self.decomposition_ = decompose(
            image, buffers, robust=self.robust,
            trim_fraction=self.trim_fraction,
            uv_resolution=self.uv_resolution,
            texture_source=self.texture_source,
            provided_albedo=provided_albedo)
        self.coeffs_ = self.decomposition_.coeffs
        return self

    def transform(self, X=None):
        if not hasattr(self, "decomposition_"):
            raise ValueError("call fit before transform")
        d = self.decomposition_
        return np.concatenate([d.texture.albedo.pixels, d.direct_map.pixels,
                               d.specular_map.pixels], axis=-1)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, **fit_params).transform()


class PhysicsResidualScorer(BaseEstimator):
    """Scene-blind specular-consistency anomaly scorer.

    fit learns a decision threshold as a quantile of training scores
    (decompositions of genuine samples); decision_function returns the raw
    residual score (higher = more suspicious).
    """

    def __init__(self, threshold_quantile=0.95, max_pixels=4096):
        self.threshold_quantile = threshold_quantile
        self.max_pixels = max_pixels

    def decision_function(self, decompositions):
        return np.array([physics_residual_score(d, max_pixels=self.max_pixels)
                         for d in decompositions])

    def fit(self, decompositions, y=None):
        scores = self.decision_function(decompositions)
        self.threshold_ = float(np.quantile(scores, self.threshold_quantile))
        return self

    def predict(self, decompositions):
        if not hasattr(self, "threshold_"):
            raise ValueError("call fit before predict")
        return (self.decision_function(decompositions) > self.threshold_).astype(int)

    def score(self, decompositions, y):
        return compute_auc(self.decision_function(decompositions),
                           np.asarray(y, dtype=np.int64))


class SpecularInconsistencyClassifier(BaseEstimator, ClassifierMixin):
    """Two-stage cross-attention detector with a fit/predict interface.

    X is a dict of branch arrays {"img", "tex", "dir", "spr"}, each
    (N, 3, S, S); y is binary with 1 = fake.
    """

    def __init__(self, epochs=30, lr=1e-3, batch_size=16, channels=8,
                 input_size=32, mode="full", learned_projections=False,
                 seed=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.channels = channels
        self.input_size = input_size
        self.mode = mode
        self.learned_projections = learned_projections
        self.seed = seed

    def _train_config(self):
        return TrainConfig(lr=self.lr, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed,
                           mode=self.mode, channels=self.channels,
                           input_size=self.input_size,
                           learned_projections=self.learned_projections)

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.int64)
        result = train(X, y, self._train_config())
        self.params_ = result["params"]
        self.loss_curve_ = result["loss_curve"]
        self.model_config_ = self._train_config().model_config()
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise ValueError("call fit before predict")
        fake = score_with_model(self.params_, X, self.model_config_,
                                batch_size=self.batch_size)
        return np.stack([1.0 - fake, fake], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

"""scikit-learn style wrappers around the pipeline stages.

Hyperparameters live in ``__init__`` and are returned by ``get_params``;
learned state is stored in attributes with a trailing underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import roc_auc_score
from sklearn.utils.validation import check_is_fitted

from .baselines import siamese_distance, sixchannel_proba, train_baseline
from .defaults import all_defaults
from .detnet import ArchConfig
from .evalkit import model_scorer, pair_distance
from .imaging import MatchParams, align_pair
from .rcnn.model import DetectorConfig, detect
from .trainer import desk_schedule, train
from .validation import check_pairs, check_positive, check_samples


class _PairModel(BaseEstimator):
    """Shared fit/score plumbing; subclasses define ``_fit_model``."""

    def _schedule(self):
        check_positive(self.epochs, "epochs")
        check_positive(self.lr, "lr")
        return desk_schedule(self.epochs, self.lr, self.input_scale, self.max_side)

    def _scorer(self):
        check_is_fitted(self, "model_")
        return model_scorer(self.model_, self.input_scale, self.max_side)

    def decision_function(self, X):
        """Pair distance; larger means more likely different."""
        scorer = self._scorer()
        return np.array([scorer(p) for p in check_pairs(X)], dtype=np.float64)

    def predict(self, X):
        """1 (different) where the distance exceeds ``threshold``, else 0."""
        return (self.decision_function(X) > self.threshold).astype(np.int64)

    def score(self, X, y):
        """ROC AUC of the pair distance against labels (1 = different)."""
        return float(roc_auc_score(np.asarray(y), self.decision_function(X)))


class DiffDetector(_PairModel, ClassifierMixin):
    """Stacked-pair difference detector.

    ``fit`` takes SynthSamples with boxes.  ``predict_boxes`` returns
    DiffBoxes per pair; ``decision_function`` is the highest box score.
    ``detector_config=None`` uses the desk-profile anchors and proposal
    counts, which suit the default 192-pixel input scale.
    """

    def __init__(self, concat_index=1, width=1, epochs=14, lr=0.01, input_scale=192, max_side=320,
                 threshold=0.5, seed=0, detector_config=None):
        self.concat_index = concat_index
        self.width = width
        self.epochs = epochs
        self.lr = lr
        self.input_scale = input_scale
        self.max_side = max_side
        self.threshold = threshold
        self.seed = seed
        self.detector_config = detector_config

    def fit(self, X, y=None):
        samples = check_samples(X, y)
        arch = ArchConfig(self.concat_index, self.width, self.input_scale)
        det = self.detector_config
        if det is None:
            det = all_defaults()["profiles"]["desk"]["rcnn"]
        if isinstance(det, dict):
            det = DetectorConfig.from_dict(det)
        self.model_, self.history_ = train(samples, arch, self._schedule(), self.seed, det)
        self.classes_ = np.array([0, 1])
        return self

    def predict_boxes(self, X):
        check_is_fitted(self, "model_")
        from .evalkit import input_scale_factor

        out = []
        for pair in check_pairs(X):
            scale = input_scale_factor(pair.height, pair.width, self.input_scale, self.max_side)
            out.append(detect(self.model_, pair, scale=scale))
        return out

    def decision_function(self, X):
        return np.array([pair_distance(b) for b in self.predict_boxes(X)], dtype=np.float64)


class SixChannelClassifier(_PairModel, ClassifierMixin):
    """Whole-pair classifier on the 6-channel stack; column 1 is P(different)."""

    def __init__(self, width=1, epochs=14, lr=0.01, input_scale=192, max_side=320, threshold=0.5, seed=0):
        self.width = width
        self.epochs = epochs
        self.lr = lr
        self.input_scale = input_scale
        self.max_side = max_side
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y=None):
        samples = check_samples(X, y)
        self.model_, self.history_ = train_baseline("classify6", samples, self.width, self._schedule(), self.seed)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        """(N, 2) array of P(same), P(different).

        A 4-D uint8 batch goes straight to the network (used by occlusion
        maps, which keep the input size fixed); anything else is rescaled.
        """
        check_is_fitted(self, "model_")
        if isinstance(X, np.ndarray) and X.ndim == 4 and X.shape[-1] == 6:
            return sixchannel_proba(self.model_, X)
        p = self.decision_function(X)
        return np.stack([1 - p, p], axis=1)


class SiameseVerifier(_PairModel):
    """Shared-weight embedding; distance between the two embeddings."""

    def __init__(self, width=1, epochs=14, lr=0.01, input_scale=192, max_side=320, threshold=0.5, seed=0):
        self.width = width
        self.epochs = epochs
        self.lr = lr
        self.input_scale = input_scale
        self.max_side = max_side
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y=None):
        samples = check_samples(X, y)
        self.model_, self.history_ = train_baseline("siamese", samples, self.width, self._schedule(), self.seed)
        return self

    def embed_distance(self, X):
        check_is_fitted(self, "model_")
        return np.array([siamese_distance(self.model_, p) for p in check_pairs(X)])


class PairAligner(BaseEstimator, TransformerMixin):
    """Registers (design, photo) tuples; ``transform`` returns AlignedPairs.

    Stateless: ``fit`` only validates the parameters.
    """

    def __init__(self, ratio=0.75, ransac_iters=1000, inlier_threshold=3.0, min_inliers=8, seed=0):
        self.ratio = ratio
        self.ransac_iters = ransac_iters
        self.inlier_threshold = inlier_threshold
        self.min_inliers = min_inliers
        self.seed = seed

    def _params(self):
        return MatchParams(ratio=self.ratio, ransac_iters=self.ransac_iters,
                           inlier_threshold=self.inlier_threshold, min_inliers=self.min_inliers, seed=self.seed)

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X):
        params = getattr(self, "params_", None) or self._params()
        out = []
        for i, (design, photo) in enumerate(X):
            out.append(align_pair(design, photo, params, pair_id=str(i)))
        return out

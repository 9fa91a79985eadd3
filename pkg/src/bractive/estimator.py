"""Scikit-learn style wrapper around the training loop.

`fit` takes a corpus directory rather than an (X, y) pair because each sample
spans three modalities stored on disk; `transform` and `score` work on sample
id arrays against that corpus.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import RunConfig
from .data import kfold_split, load_dataset
from .encoders import EncoderConfig
from .losses import LossConfig
from .training import BractiveModel, TrainConfig, evaluate, train


class BractiveAligner(BaseEstimator):
    """Fits the tri-modal aligner on a generated corpus directory.

    Parameters mirror the config sections; anything left as None falls back
    to the section defaults.
    """

    def __init__(self, fold=0, epochs=30, base_lr=1e-3, batch_size=32, k=4,
                 sigma=0.07, seed=0, d_model=32, num_layers=2, gamma=0.5):
        self.fold = fold
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.k = k
        self.sigma = sigma
        self.seed = seed
        self.d_model = d_model
        self.num_layers = num_layers
        self.gamma = gamma

    def _configs(self):
        model = EncoderConfig(d=self.d_model, layers=self.num_layers,
                              seed=self.seed)
        tr = TrainConfig(epochs=self.epochs, base_lr=self.base_lr,
                         batch_size=self.batch_size, k=self.k, seed=self.seed)
        loss = LossConfig(sigma=self.sigma)
        return model, tr, loss

    def fit(self, data_dir, y=None):
        model_cfg, train_cfg, loss_cfg = self._configs()
        dataset = load_dataset(data_dir)
        state = BractiveModel(model_cfg)
        state, _ = train(state, dataset, self.fold, train_cfg, loss_cfg,
                         gammas=(self.gamma,))
        self.state_ = state
        self.dataset_ = dataset
        self.train_cfg_ = train_cfg
        self.loss_cfg_ = loss_cfg
        return self

    def transform(self, sample_ids):
        """Per-sample aligned summary features, one row of
        [text | visual | fmri] summaries per id."""
        self._check_fitted()
        rows = []
        for sid in np.asarray(sample_ids, dtype=int):
            s = self.dataset_.load_sample(int(sid))
            model = self.state_.model
            vis = model.visual.encode_image(s.image)
            fm = model.fmri.encode_grid(self.dataset_.flatten_map.flatten(s.fmri))
            tx = model.text.encode_tokens(s.caption, s.valid_mask)
            rows.append(np.concatenate([tx.cls.data[0], vis.cls.data[0],
                                        fm.cls.data[0]]))
        return np.stack(rows)

    def score(self, sample_ids=None, y=None):
        """Mean ROI dice at the configured threshold over the given ids
        (default: the held-out fold)."""
        self._check_fitted()
        if sample_ids is None:
            _, sample_ids = kfold_split(self.dataset_.manifest, self.fold)
        report = evaluate(self.state_.model, self.dataset_,
                          list(np.asarray(sample_ids, dtype=int)),
                          self.train_cfg_, self.loss_cfg_, gammas=(self.gamma,))
        return float(report["dice"][self.gamma])

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise RuntimeError("estimator is not fitted; call fit(data_dir) first")

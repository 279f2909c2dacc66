from __future__ import annotations

import tempfile

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DatasetRow, DatasetVersion, ReformulationInstance
from .errors import ValidationError
from .pipeline import IterationRunner, RunConfig, rewrite_instances


def _check_instances(X):
    X = list(X)
    if not X:
        raise ValidationError("expected at least one instance")
    bad = [type(x).__name__ for x in X if not isinstance(x, ReformulationInstance)]
    if bad:
        raise ValidationError(f"expected ReformulationInstance objects, got {bad[0]}")
    return X


class IterCQR(BaseEstimator):
    """Iterative conversational query reformulator.

    ``fit(X, y, store=...)`` takes reformulation instances, their bootstrap
    rewrites and the frozen passage embedding store, then runs iterations
    0..T. ``predict(X)`` returns the final model's top beam rewrite for each
    instance.

    :param run_dir: keep checkpoints/datasets here (resumable); a temporary
        directory is used when None
    """

    def __init__(
        self,
        n_candidates=10,
        tau=1,
        n_iterations=15,
        epochs_init=5,
        epochs_mbr=2,
        epochs_top1=5,
        learning_rate=1e-5,
        batch_size=8,
        max_query_len=32,
        beam_width=None,
        embedding_size=64,
        hidden_size=128,
        min_frequency=1,
        seed=0,
        run_dir=None,
    ):
        self.n_candidates = n_candidates
        self.tau = tau
        self.n_iterations = n_iterations
        self.epochs_init = epochs_init
        self.epochs_mbr = epochs_mbr
        self.epochs_top1 = epochs_top1
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_query_len = max_query_len
        self.beam_width = beam_width
        self.embedding_size = embedding_size
        self.hidden_size = hidden_size
        self.min_frequency = min_frequency
        self.seed = seed
        self.run_dir = run_dir

    def _run_config(self):
        return RunConfig(
            n=self.n_candidates,
            tau=self.tau,
            T=self.n_iterations,
            epochs_init=self.epochs_init,
            epochs_mbr=self.epochs_mbr,
            epochs_top1=self.epochs_top1,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_query_len=self.max_query_len,
            beam_width=self.beam_width,
            embedding_size=self.embedding_size,
            hidden_size=self.hidden_size,
            min_frequency=self.min_frequency,
            seed=self.seed,
        )

    def fit(self, X, y, store):
        X = _check_instances(X)
        y = list(y)
        if len(y) != len(X):
            raise ValidationError(f"{len(y)} bootstrap rewrites for {len(X)} instances")
        config = self._run_config()
        d0 = DatasetVersion(0, [DatasetRow(x.instance_id, target=t) for x, t in zip(X, y)], "file")
        if self.run_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                self._fit_in(config, X, d0, store, tmp)
        else:
            self._fit_in(config, X, d0, store, self.run_dir)
        return self

    def _fit_in(self, config, X, d0, store, run_dir):
        runner = IterationRunner(config, X, d0, store, run_dir)
        self.manifest_ = runner.run()
        self.model_ = runner.load_checkpoint(len(self.manifest_["iterations"]) - 1, self.manifest_)
        self.phases_ = [rec["phase"] for rec in self.manifest_["iterations"]]

    def predict(self, X):
        check_is_fitted(self, "model_")
        return rewrite_instances(self.model_, _check_instances(X), self.beam_width or self.n_candidates)

    def transform(self, X):
        return self.predict(X)

    def candidates(self, x, n=None):
        """Beam candidates (with log-probabilities) for a single instance."""
        check_is_fitted(self, "model_")
        n = n or self.n_candidates
        return self.model_.generate_candidates(x.model_input, n, max(n, self.beam_width or n))

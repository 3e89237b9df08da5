"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset, split
from .train import TrainConfig, train_loop, validation_elbo


class VampMixtureClustering(ClusterMixin, TransformerMixin, BaseEstimator):
    """Deep clustering with a VAE whose prior is a learned Gaussian mixture.

    Parameters mirror :class:`~vampmix.train.TrainConfig`; ``validation_fraction``
    rows are held out for early stopping.  Passing ``y`` to :meth:`fit` switches
    the early-stop metric to validation NMI (unless ``early_stop`` is set).

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Cluster index of each training row.
    n_clusters_ : int
        Number of distinct clusters used by the training rows.
    weights_ : ndarray of shape (n_components,)
        Mixing proportions of the fitted prior.
    model_ : VAEModel
    history_ : list of dict
        Per-epoch training records.

    Examples
    --------
    >>> from vampmix.data import SynthSpec, synth_mixture
    >>> X = synth_mixture(SynthSpec(points_per_component=50)).features
    >>> est = VampMixtureClustering(n_components=4, latent_dim=2, hidden=(8,),
    ...                             max_epochs=2).fit(X)
    >>> est.transform(X).shape
    (150, 2)
    """

    def __init__(self, prior="vmm", n_components=100, latent_dim=10, hidden=(500, 500, 2000),
                 batch_size=256, lr_vi=1e-4, lr_eb=1e-4, max_epochs=10000, patience=100,
                 early_stop=None, likelihood="gaussian", n_kl_samples=1,
                 validation_fraction=1.0 / 6.0, random_state=0, **options):
        self.prior = prior
        self.n_components = n_components
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.batch_size = batch_size
        self.lr_vi = lr_vi
        self.lr_eb = lr_eb
        self.max_epochs = max_epochs
        self.patience = patience
        self.early_stop = early_stop
        self.likelihood = likelihood
        self.n_kl_samples = n_kl_samples
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.options = options

    def get_params(self, deep=True):
        params = super().get_params(deep)
        params.pop("options", None)
        params.update(self.options)
        return params

    def set_params(self, **params):
        base = set(self._get_param_names())
        for key, value in params.items():
            if key in base:
                setattr(self, key, value)
            else:
                self.options[key] = value
        return self

    def _config(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(prior=self.prior, n_components=self.n_components,
                           latent_dim=self.latent_dim, hidden=tuple(self.hidden),
                           batch_size=self.batch_size, lr_vi=self.lr_vi, lr_eb=self.lr_eb,
                           max_epochs=self.max_epochs, patience=self.patience,
                           early_stop=self.early_stop, seed=seed,
                           n_kl_samples=self.n_kl_samples, likelihood=self.likelihood,
                           **self.options)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if y is not None:
            y = np.asarray(y)
            if len(y) != len(X):
                raise ValueError("X and y differ in length")
        config = self._config()
        ds = split(Dataset(X, y), self.validation_fraction, config.seed)
        self.checkpoint_, self.history_ = train_loop(ds, config)
        self.model_ = self.checkpoint_.model
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        self.n_clusters_ = int(len(np.unique(self.labels_)))
        self.weights_ = self.model_.prior.weights()
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        """Cluster membership probabilities at the posterior means."""
        X = self._check(X)
        return self.model_.responsibilities(X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def transform(self, X):
        """Posterior means of the latent code."""
        X = self._check(X)
        return self.model_.posterior(X).mean

    def score(self, X, y=None):
        """Mean per-row ELBO (higher is better)."""
        X = self._check(X)
        return validation_elbo(self.model_, X, self.checkpoint_.config["seed"])

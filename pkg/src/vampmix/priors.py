"""Latent priors: standard normal, VampPrior, Bayesian GMM and VMM.

The two Bayesian mixtures (``bayes-gmm`` and ``vmm``) are fitted by
Empirical-Bayes MAP-EM on posterior samples; the VampPrior's pseudo-inputs
are trained jointly with the VAE.  Prior parameters live in a
:class:`~vampmix.ndgrad.ParamStore` of unconstrained reals:

``pi_logits``      (K,)      softmax -> mixing proportions
``alpha_raw``      ()        softplus -> DP concentration
``centers``        (K, p)    bayes-gmm cluster means
``pseudo_raw``     (K, D)    vampprior / vmm pseudo-inputs before the domain map
``prec_diag_raw``  (K, p)    softplus -> diagonal of the precision Cholesky
``prec_offdiag``   (K, p, p) strictly-lower part of the precision Cholesky
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import ndgrad as nd
from .dists import (
    LOG_2PI, cholesky_diagonal, cov_gauss_logpdf, diag_gauss_entropy, diag_gauss_logpdf,
    diag_gauss_sample, dirichlet_logpdf, invgamma_logpdf, prec_gauss_logpdf, wishart_logpdf,
)
from .nets import decode_mean, encode

PRIOR_KINDS = ("standard-normal", "vampprior", "bayes-gmm", "vmm")
EM_KINDS = ("bayes-gmm", "vmm")
PSEUDO_TRANSFORMS = ("tanh", "identity")
# arrays whose leading axis indexes components; used for gradient gating
_COMPONENT_PARAMS = ("pi_logits", "centers", "pseudo_raw", "prec_diag_raw", "prec_offdiag")


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class ComponentMoments:
    """Mean and diagonal variance of each component's center distribution."""

    mean: object
    var: object

    def numpy(self):
        return ComponentMoments(np.array(nd._value(self.mean)), np.array(nd._value(self.var)))


class MixturePrior:
    """Prior kind, its parameters, and the switches that shape EM updates."""

    def __init__(self, kind, n_components, latent_dim, params=None, data_dim=None,
                 pseudo_transform="identity", fix_precision=False,
                 zero_center_variance=False, gate_eliminated=False):
        if kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {kind!r}; expected one of {PRIOR_KINDS}")
        if pseudo_transform not in PSEUDO_TRANSFORMS:
            raise ValueError(f"unknown pseudo-input transform {pseudo_transform!r}")
        self.kind = kind
        self.n_components = 1 if kind == "standard-normal" else int(n_components)
        self.latent_dim = int(latent_dim)
        self.data_dim = data_dim
        self.params = params if params is not None else nd.ParamStore()
        self.pseudo_transform = pseudo_transform
        self.fix_precision = bool(fix_precision)
        self.zero_center_variance = bool(zero_center_variance)
        self.gate_eliminated = bool(gate_eliminated)
        self.eliminated = np.zeros(self.n_components, dtype=bool)
        if self.fix_precision:
            for name in ("prec_diag_raw", "prec_offdiag"):
                if name in self.params:
                    self.params.set_trainable(name, False)

    @property
    def uses_em(self):
        return self.kind in EM_KINDS

    @property
    def has_pseudo_inputs(self):
        return self.kind in ("vampprior", "vmm")

    def options(self):
        return dict(pseudo_transform=self.pseudo_transform, fix_precision=self.fix_precision,
                    zero_center_variance=self.zero_center_variance,
                    gate_eliminated=self.gate_eliminated)

    def copy(self):
        out = MixturePrior(self.kind, self.n_components, self.latent_dim, self.params.copy(),
                           self.data_dim, **self.options())
        out.eliminated = self.eliminated.copy()
        return out

    # -- parameter maps, usable with arrays (from self.params) or Tensor views

    def _view(self, psi):
        return self.params if psi is None else psi

    def log_weights(self, psi=None):
        psi = self._view(psi)
        K = self.n_components
        if self.uses_em:
            return nd.log_softmax(psi["pi_logits"])
        return nd.Tensor(np.full(K, -np.log(K)))

    def weights(self):
        return np.exp(nd._value(self.log_weights()))

    def alpha(self, psi=None):
        return nd.softplus(self._view(psi)["alpha_raw"])

    def precision_cholesky(self, psi=None):
        psi = self._view(psi)
        p = self.latent_dim
        lower = np.tril(np.ones((p, p)), -1)
        diag = nd.softplus(psi["prec_diag_raw"])
        return nd.add(nd.mul(psi["prec_offdiag"], lower),
                      nd.mul(nd.reshape(diag, nd._value(diag).shape + (1,)), np.eye(p)))

    def precision(self):
        L = nd._value(self.precision_cholesky())
        return L @ np.swapaxes(L, -1, -2)

    def pseudo_inputs(self, psi=None):
        raw = self._view(psi)["pseudo_raw"]
        return nd.tanh(raw) if self.pseudo_transform == "tanh" else nd._wrap(raw)


def _pseudo_raw_from_data(x, transform):
    if transform == "tanh":
        return np.arctanh(np.clip(x, -1 + 1e-6, 1 - 1e-6))
    return np.array(x, dtype=np.float64)


def init_prior(kind, n_components, latent_dim, X, rng, phi=None, pseudo_transform="identity",
               fix_precision=False, zero_center_variance=False, gate_eliminated=False,
               precision_init=None):
    """Build a prior initialized from training data ``X`` (N x D).

    Pseudo-inputs are K distinct training points; bayes-gmm centers are the
    encoder means of K distinct training points (needs ``phi``).  Precisions
    start at ``precision_init * I``, by default the hyper-prior mean K^(1/p) I.
    """
    X = np.asarray(X, dtype=np.float64)
    K = 1 if kind == "standard-normal" else int(n_components)
    p = int(latent_dim)
    params = nd.ParamStore()
    if kind != "standard-normal":
        if K > len(X):
            raise ValueError(f"need at least K={K} training points to initialize, got {len(X)}")
        idx = rng.choice(len(X), size=K, replace=False)
    if kind in ("vampprior", "vmm"):
        params.add("pseudo_raw", _pseudo_raw_from_data(X[idx], pseudo_transform))
    if kind in EM_KINDS:
        params.add("pi_logits", np.zeros(K))
        params.add("alpha_raw", softplus_inv(1.0))
        if kind == "bayes-gmm":
            if phi is None:
                raise ValueError("bayes-gmm initialization needs encoder parameters")
            params.add("centers", nd._value(encode(X[idx], phi).mean))
        lam = K ** (1.0 / p) if precision_init is None else float(precision_init)
        params.add("prec_diag_raw", np.full((K, p), softplus_inv(np.sqrt(lam))))
        params.add("prec_offdiag", np.zeros((K, p, p)))
    return MixturePrior(kind, K, p, params, data_dim=X.shape[1], pseudo_transform=pseudo_transform,
                        fix_precision=fix_precision, zero_center_variance=zero_center_variance,
                        gate_eliminated=gate_eliminated)


def component_moments(state, phi, psi=None):
    """Center distributions: encoder outputs on pseudo-inputs, or point centers."""
    K, p = state.n_components, state.latent_dim
    if state.kind == "standard-normal":
        return ComponentMoments(np.zeros((1, p)), np.zeros((1, p)))
    if state.kind == "bayes-gmm":
        return ComponentMoments(state._view(psi)["centers"], np.zeros((K, p)))
    q = encode(state.pseudo_inputs(psi), phi)
    var = np.zeros((K, p)) if state.zero_center_variance else q.var
    return ComponentMoments(q.mean, var)


def expected_component_loglik(z, mean, var, L):
    """E over mu ~ N(mean, diag var) of log N(z | mu, (L L^T)^-1)."""
    lam_diag = nd.sum(nd.square(L), axis=-1)
    return nd.sub(prec_gauss_logpdf(z, mean, L), nd.mul(0.5, nd.sum(nd.mul(lam_diag, var), axis=-1)))


def _expand(z):
    z = nd._wrap(z)
    return nd.reshape(z, z.shape[:-1] + (1, z.shape[-1]))


def component_covariances(state, moments):
    """Marginal covariance of each component (constant arrays)."""
    K, p = state.n_components, state.latent_dim
    S = nd._value(moments.var)
    if state.kind == "standard-normal":
        return np.eye(p)[None]
    if state.kind == "vampprior":
        return np.einsum("kd,de->kde", S, np.eye(p))
    L = nd._value(state.precision_cholesky())
    Linv = np.linalg.inv(L)
    cov = np.swapaxes(Linv, -1, -2) @ Linv
    if state.kind == "vmm":
        cov = cov + np.einsum("kd,de->kde", S, np.eye(p))
    return cov


def component_log_densities(z, state, moments):
    """log pi_j + log p(z | component j); shape (..., K)."""
    K = state.n_components
    if state.kind == "standard-normal":
        return _expand(diag_gauss_logpdf(z, 0.0, np.ones(state.latent_dim)))
    ze = _expand(z)
    if state.kind == "vampprior":
        comp = diag_gauss_logpdf(ze, moments.mean, moments.var)
        return nd.sub(comp, np.log(K))
    logw = nd._value(state.log_weights())
    if state.kind == "bayes-gmm":
        L = nd._value(state.precision_cholesky())
        comp = prec_gauss_logpdf(ze, nd._value(moments.mean), L)
    else:
        comp = cov_gauss_logpdf(ze, nd._value(moments.mean), component_covariances(state, moments))
    return nd.add(comp, logw)


def prior_log_density(z, state, moments):
    """log p(z) under the prior's marginal density."""
    if state.kind == "standard-normal":
        return diag_gauss_logpdf(z, 0.0, np.ones(state.latent_dim))
    return nd.logsumexp(component_log_densities(z, state, moments), axis=-1)


def kl_to_prior(q, state, moments, n_samples=1, rng=None, z=None):
    """Per-datum KL(q || p).

    Closed form for the standard normal; otherwise analytic entropy minus a
    Monte-Carlo cross-entropy over ``n_samples`` reparameterized draws (or the
    supplied draws ``z`` of shape (S, ..., p)).
    """
    if state.kind == "standard-normal":
        m, s = q.mean, q.var
        terms = nd.sub(nd.add(s, nd.square(m)), nd.add(nd.log(s), 1.0))
        return nd.mul(0.5, nd.sum(terms, axis=-1))
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if z is None:
        z = diag_gauss_sample(q, rng, n=n_samples)
    cross = nd.div(nd.sum(prior_log_density(z, state, moments), axis=0), float(nd._value(z).shape[0]))
    return nd.neg(nd.add(diag_gauss_entropy(q), cross))


def _em_component_terms(z, state, log_pi, L, moments):
    ze = _expand(z)
    return nd.add(expected_component_loglik(ze, moments.mean, moments.var, L), log_pi)


def e_step(z, state, moments):
    """Responsibilities q(c_i = j) for a batch of latent points (M x K)."""
    if not state.uses_em:
        raise ValueError(f"e_step applies to bayes-gmm and vmm priors, not {state.kind!r}")
    logits = _em_component_terms(z, state, state.log_weights(), state.precision_cholesky(),
                                 moments.numpy())
    return special.softmax(nd._value(logits), axis=-1)


def responsibilities(z, state, moments):
    """Cluster membership probabilities for any prior kind."""
    if state.uses_em:
        return e_step(z, state, moments)
    if state.kind == "standard-normal":
        return np.ones((np.shape(z)[0], 1))
    return special.softmax(nd._value(component_log_densities(z, state, moments.numpy())), axis=-1)


def _em_objective(z, r, state, psi, moments):
    K, p = state.n_components, state.latent_dim
    log_pi = state.log_weights(psi)
    alpha = state.alpha(psi)
    L = state.precision_cholesky(psi)
    data = nd.sum(nd.mul(r, _em_component_terms(z, state, log_pi, L, moments)))
    centers = nd.sum(nd.sub(diag_gauss_logpdf(moments.mean, 0.0, np.ones(p)),
                            nd.mul(0.5, nd.sum(moments.var, axis=-1))))
    scale = (K ** (1.0 / p) / (p + 2)) * np.eye(p)
    hyper = nd.add(invgamma_logpdf(alpha), dirichlet_logpdf(alpha=alpha, log_pi=log_pi))
    hyper = nd.add(hyper, nd.add(centers, nd.sum(wishart_logpdf(L, p + 2, scale))))
    return nd.add(data, hyper)


def em_objective(z, r, state, moments):
    """Expected complete-data log joint of the mixture (plain float).

    The data term sums over the batch without normalization, so the batch
    size sets the strength of the data relative to the hyper-priors.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1, state.latent_dim)
    r = np.asarray(r, dtype=np.float64).reshape(len(z), state.n_components)
    return float(_em_objective(z, r, state, None, moments.numpy()))


def em_gradients(state, z, r, phi):
    """EM objective and its gradient wrt the trainable prior parameters.

    ``r`` is held constant; the encoder weights are frozen.
    """
    store = state.params.merged(phi, freeze_others=True) if state.kind == "vmm" else state.params

    def objective(view):
        moments = component_moments(state, view, psi=view)
        return _em_objective(z, r, state, view, moments)

    return nd.value_and_grad(objective, store)


def em_update(state, z, phi, optimizer):
    """One E-step followed by one Adam ascent step on the prior parameters.

    For the vmm, gradients reach the pseudo-inputs through the encoder with
    every encoder weight held fixed.
    """
    if not state.uses_em:
        raise ValueError(f"em_update applies to bayes-gmm and vmm priors, not {state.kind!r}")
    z = np.asarray(z, dtype=np.float64)
    r = e_step(z, state, component_moments(state, phi))
    _, ascent = em_gradients(state, z, r, phi)
    grads = {k: -g for k, g in ascent.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite EM gradient in prior parameter block {name!r}")
    frozen = state.eliminated if state.gate_eliminated else None
    kept = None
    if frozen is not None and frozen.any():
        kept = {k: state.params[k][frozen].copy() for k in _COMPONENT_PARAMS if k in state.params}
    nd.adam_step(optimizer, state.params, grads)
    if kept:
        for k, rows in kept.items():
            arr = state.params[k].copy()
            arr[frozen] = rows
            state.params[k] = arr
    return state


def utilization(r, state=None):
    """Count of distinct argmax assignments, mixture proportions, assignments."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or len(r) < 1:
        raise ValueError("responsibilities must be an N x K matrix with N >= 1")
    assign = np.argmax(r, axis=1)
    count = len(np.unique(assign))
    props = state.weights() if state is not None else r.mean(axis=0)
    return count, props, assign


def n_preview_samples(weights, j):
    w = np.asarray(weights, dtype=np.float64)
    return int(np.rint(10.0 * w[j] / w.max()))


def prior_predictive_sample(state, moments, theta, head, rng, components=None, exemplars=None):
    """Prior-predictive preview grid, one column per component.

    Columns follow descending mixing weight; component j contributes
    round(10 * pi_j / max pi) decoded samples plus its exemplar, if given.
    """
    weights = state.weights()
    comps = range(state.n_components) if components is None else components
    comps = sorted(comps, key=lambda j: (-weights[j], j))
    means = nd._value(moments.mean)
    factors = nd.cholesky(component_covariances(state, moments))
    columns = []
    for j in comps:
        n = n_preview_samples(weights, j)
        eps = rng.standard_normal((n, state.latent_dim))
        z = means[j] + eps @ factors[j].T
        samples = decode_mean(z, theta, head)
        columns.append({
            "component": int(j),
            "weight": float(weights[j]),
            "samples": samples,
            "exemplar": None if exemplars is None else np.asarray(exemplars[j]),
        })
    return columns

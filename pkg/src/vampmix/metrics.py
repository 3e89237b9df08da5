"""Clustering scores and rate/distortion diagnostics for fitted models."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from . import ndgrad as nd
from .dists import LOG_2PI, diag_gauss_sample
from .nets import decode_loglik
from .priors import kl_to_prior, prior_log_density


@dataclass
class ClusteringReport:
    nmi: float
    ari: float
    accuracy: float
    utilized_clusters: int
    n: int
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelReport:
    iw_log_marginal: float
    negative_distortion: float
    rate: float
    marginal_kl: float
    mutual_information: float
    marginal_kl_direct: float
    marginal_kl_gap_se: float
    n: int

    @property
    def elbo(self):
        return self.negative_distortion - self.rate

    def to_dict(self):
        d = asdict(self)
        d["elbo"] = self.elbo
        return d


def nmi_score(assignments, labels):
    """NMI with natural logs and arithmetic-mean normalization."""
    return float(normalized_mutual_info_score(labels, assignments, average_method="arithmetic"))


def matched_accuracy(assignments, labels, r):
    """Accuracy after labelling each cluster by its most confident member."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    representative = np.argmax(np.asarray(r), axis=0)
    predicted = labels[representative[assignments]]
    return float(np.mean(predicted == labels))


def clustering_scores(assignments, labels, r):
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if len(assignments) < 2 or len(assignments) != len(labels):
        raise ValueError("clustering_scores needs N >= 2 matching assignments and labels")
    degenerate = len(np.unique(labels)) == 1 and len(np.unique(assignments)) == 1
    return ClusteringReport(
        nmi=1.0 if degenerate else nmi_score(assignments, labels),
        ari=float(adjusted_rand_score(labels, assignments)),
        accuracy=matched_accuracy(assignments, labels, r),
        utilized_clusters=int(len(np.unique(assignments))),
        n=int(len(labels)),
        degenerate=degenerate,
    )


# --------------------------------------------------------------- model terms

def _batches(n, size=1024):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def elbo_decomposition_terms(X, model, n_samples, rng):
    """Per-datum negative distortion and rate estimates."""
    X = np.asarray(X, dtype=np.float64)
    moments = model.moments()
    neg_dist, rate = np.empty(len(X)), np.empty(len(X))
    for sl in _batches(len(X)):
        q = model.posterior(X[sl])
        z = nd._value(diag_gauss_sample(q, rng, n=n_samples))
        neg_dist[sl] = nd._value(decode_loglik(X[sl], z, model.theta, model.head)).mean(axis=0)
        rate[sl] = nd._value(kl_to_prior(q, model.prior, moments, n_samples, rng))
    return neg_dist, rate


def elbo_decomposition(X, model, n_samples, rng):
    """Validation-set means of (negative distortion, rate)."""
    neg_dist, rate = elbo_decomposition_terms(X, model, n_samples, rng)
    return float(neg_dist.mean()), float(rate.mean())


def _pairwise_log_q(z, q):
    # log q(z_n | x_m) for every (n, m); expands the Gaussian quadratic
    mean, var = q.mean, q.var
    inv = 1.0 / var
    quad = (z * z) @ inv.T - 2.0 * z @ (mean * inv).T + np.sum(mean * mean * inv, axis=1)
    return -0.5 * (quad + np.sum(np.log(var), axis=1) + z.shape[1] * LOG_2PI)


def log_aggregate_posterior(z, q):
    """log (1/N) sum_m q(z | x_m) for each row of ``z``."""
    out = np.empty(len(z))
    for sl in _batches(len(z)):
        out[sl] = logsumexp(_pairwise_log_q(z[sl], q), axis=1) - np.log(len(q.mean))
    return out


def _own_log_q(z, q):
    return -0.5 * np.sum(np.log(q.var) + LOG_2PI + (z - q.mean) ** 2 / q.var, axis=-1)


def mutual_information_terms(X, model, rng):
    """Per-datum index-code MI terms, one posterior draw per datum."""
    q = model.posterior(X)
    z = nd._value(diag_gauss_sample(q, rng))
    return _own_log_q(z, q) - log_aggregate_posterior(z, q)


def mi_and_marginal_kl(X, model, rng, rate=None, n_samples=1):
    """(MI, marginal KL) with marginal KL = rate - MI."""
    mi = float(mutual_information_terms(X, model, rng).mean())
    if rate is None:
        rate = elbo_decomposition(X, model, n_samples, rng)[1]
    return mi, rate - mi


def marginal_kl_direct_terms(X, model, rng):
    """Per-datum log q(z) - log p(z) at fresh draws from the aggregate posterior."""
    q = model.posterior(X)
    z = nd._value(diag_gauss_sample(q, rng))
    log_p = nd._value(prior_log_density(z, model.prior, model.moments()))
    return log_aggregate_posterior(z, q) - log_p


def iw_log_marginal(X, model, S, rng, chunk=64):
    """Importance-weighted log p(x) estimate per datum with S proposals from q."""
    if S < 1:
        raise ValueError("S must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    moments = model.moments()
    out = np.empty(len(X))
    for sl in _batches(len(X), 256):
        q = model.posterior(X[sl])
        logw = []
        for start in range(0, S, chunk):
            n = min(chunk, S - start)
            z = nd._value(diag_gauss_sample(q, rng, n=n))
            ll = nd._value(decode_loglik(X[sl], z, model.theta, model.head))
            lp = nd._value(prior_log_density(z, model.prior, moments))
            lq = _own_log_q(z, q)
            logw.append(ll + lp - lq)
        out[sl] = logsumexp(np.concatenate(logw, axis=0), axis=0) - np.log(S)
    return out


def model_report(X, model, rng, n_samples=1, iw_samples=100):
    X = np.asarray(X, dtype=np.float64)
    neg_dist, rate = elbo_decomposition_terms(X, model, n_samples, rng)
    mi_terms = mutual_information_terms(X, model, rng)
    direct = marginal_kl_direct_terms(X, model, rng)
    iw = iw_log_marginal(X, model, iw_samples, rng)
    mi = float(mi_terms.mean())
    # paired standard error of (rate - MI) - direct, per datum
    gap = rate - mi_terms - direct
    gap_se = float(gap.std(ddof=1) / np.sqrt(len(X))) if len(X) > 1 else 0.0
    return ModelReport(
        iw_log_marginal=float(iw.mean()),
        negative_distortion=float(neg_dist.mean()),
        rate=float(rate.mean()),
        marginal_kl=float(rate.mean()) - mi,
        mutual_information=mi,
        marginal_kl_direct=float(direct.mean()),
        marginal_kl_gap_se=gap_se,
        n=int(len(X)),
    )

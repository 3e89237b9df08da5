"""Log-densities, entropies and samplers used by the generative model.

Every density accepts numpy arrays or :class:`~vampmix.ndgrad.Tensor` inputs
and returns a Tensor, so the same code serves plain evaluation and the
gradient tape.  Leading axes broadcast; the event axis is the last one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import ndgrad as nd

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance; ``var`` holds the variances."""

    mean: object
    var: object

    def __post_init__(self):
        m, s = nd._value(self.mean), nd._value(self.var)
        if m.shape != s.shape:
            raise nd.ShapeError("DiagGaussian", m.shape, s.shape)
        if np.any(~(s > 0)):
            raise ValueError("DiagGaussian variance must be strictly positive")

    @property
    def dim(self):
        return nd._value(self.mean).shape[-1]


def _check_positive(x, what):
    if np.any(~(nd._value(x) > 0)):
        raise ValueError(f"{what} must be strictly positive")


def _eye_like(L):
    return np.eye(nd._value(L).shape[-1])


def cholesky_diagonal(L):
    """Diagonal of a (stack of) square matrices, as a differentiable op."""
    return nd.sum(nd.mul(L, _eye_like(L)), axis=-1)


def diag_gauss_logpdf(z, mean, var):
    _check_positive(var, "variance")
    diff = nd.sub(z, mean)
    terms = nd.add(nd.log(var), nd.div(nd.square(diff), var))
    return nd.mul(-0.5, nd.add(nd.sum(terms, axis=-1), nd._value(diff).shape[-1] * LOG_2PI))


def prec_gauss_logpdf(z, mean, L):
    """log N(z | mean, (L L^T)^-1) with L lower triangular."""
    diag = cholesky_diagonal(L)
    _check_positive(diag, "precision Cholesky diagonal")
    diff = nd.sub(z, mean)
    p = nd._value(diff).shape[-1]
    proj = nd.matvec(nd.transpose(L), diff)
    return nd.sub(nd.sum(nd.log(diag), axis=-1),
                  nd.add(0.5 * p * LOG_2PI, nd.mul(0.5, nd.sum(nd.square(proj), axis=-1))))


def cov_gauss_logpdf(z, mean, cov):
    """log N(z | mean, cov) for constant SPD covariance (stack allowed)."""
    C = nd._value(cov)
    Lc = nd.cholesky(C)
    Linv = np.linalg.inv(Lc)
    logdet = 2.0 * np.log(np.diagonal(Lc, axis1=-2, axis2=-1)).sum(-1)
    diff = nd.sub(z, mean)
    p = nd._value(diff).shape[-1]
    quad = nd.sum(nd.square(nd.matvec(Linv, diff)), axis=-1)
    return nd.mul(-0.5, nd.add(quad, logdet + p * LOG_2PI))


def dirichlet_logpdf(pi=None, alpha=1.0, *, log_pi=None):
    """Symmetric Dirichlet(alpha / K) log-density on the open simplex.

    Pass either ``pi`` or, for numerical stability inside the tape, ``log_pi``.
    """
    if log_pi is None:
        pv = nd._value(pi)
        if np.any(~(pv > 0)):
            raise ValueError("Dirichlet argument must lie in the open simplex (zero entry)")
        if abs(pv.sum() - 1.0) > 1e-9:
            raise ValueError(f"Dirichlet argument sums to {pv.sum()!r}, not 1")
        log_pi = nd.log(pi)
    _check_positive(alpha, "Dirichlet concentration")
    K = nd._value(log_pi).shape[-1]
    a = nd.div(alpha, float(K))
    norm = nd.sub(nd.gammaln(alpha), nd.mul(float(K), nd.gammaln(a)))
    return nd.add(norm, nd.mul(nd.sub(a, 1.0), nd.sum(log_pi, axis=-1)))


def wishart_logpdf(L, dof, scale):
    """Wishart(dof, scale) log-density at Lambda = L L^T.

    ``scale`` must be a constant SPD matrix; L may be a stack (..., p, p).
    """
    V = np.asarray(scale, dtype=np.float64)
    p = V.shape[-1]
    if not dof > p - 1:
        raise ValueError(f"Wishart degrees of freedom {dof} must exceed p - 1 = {p - 1}")
    diag = cholesky_diagonal(L)
    _check_positive(diag, "precision Cholesky diagonal")
    Lv = nd.cholesky(V)
    W = np.linalg.inv(Lv)
    logdet_lam = nd.mul(2.0, nd.sum(nd.log(diag), axis=-1))
    trace = nd.sum(nd.sum(nd.square(nd.matmul(W, L)), axis=-1), axis=-1)
    logdet_v = 2.0 * np.log(np.diag(Lv)).sum()
    const = -0.5 * dof * p * np.log(2.0) - 0.5 * dof * logdet_v - special.multigammaln(0.5 * dof, p)
    return nd.add(nd.sub(nd.mul(0.5 * (dof - p - 1), logdet_lam), nd.mul(0.5, trace)), const)


def invgamma_logpdf(alpha):
    """InverseGamma(shape=1, scale=1) log-density."""
    _check_positive(alpha, "InverseGamma argument")
    return nd.neg(nd.add(nd.mul(2.0, nd.log(alpha)), nd.div(1.0, alpha)))


def diag_gauss_sample(g, rng, n=None):
    """Reparameterized draw ``mean + sqrt(var) * eps``.

    With ``n`` set, returns n stacked draws along a new leading axis.
    """
    shape = nd._value(g.mean).shape
    eps = rng.standard_normal(shape if n is None else (n,) + shape)
    return nd.add(g.mean, nd.mul(nd.sqrt(g.var), eps))


def diag_gauss_entropy(g):
    return nd.mul(0.5, nd.sum(nd.add(nd.log(g.var), LOG_2PI + 1.0), axis=-1))

"""MLP encoder/decoder and the observation likelihood heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .dists import LOG_2PI, DiagGaussian

VAR_FLOOR = 1e-6
LIKELIHOODS = ("gaussian", "bernoulli")


@dataclass
class MlpSpec:
    input_dim: int
    hidden: list = field(default_factory=list)
    output_dim: int = 1

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if min([self.input_dim, self.output_dim] + self.hidden) <= 0:
            raise ValueError(f"MLP widths must be positive, got {self}")

    @property
    def widths(self):
        return [self.input_dim] + self.hidden + [self.output_dim]


@dataclass
class LikelihoodHead:
    """``gaussian`` uses one global variance, softplus of ``dec/noise_raw``."""

    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.kind!r}; expected one of {LIKELIHOODS}")


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(spec, rng, prefix):
    """Glorot-uniform weights and zero biases, ``{prefix}/W{i}``, ``{prefix}/b{i}``."""
    widths = spec.widths
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{prefix}/W{i}"] = glorot(rng, a, b)
        params[f"{prefix}/b{i}"] = np.zeros(b)
    return params


def init_encoder(input_dim, hidden, latent_dim, rng):
    """Trunk ``enc/W*`` plus linear mean head and softplus variance head."""
    params = init_mlp(MlpSpec(input_dim, hidden[:-1], hidden[-1]), rng, "enc") if hidden else {}
    width = hidden[-1] if hidden else input_dim
    params["enc/mean/W"] = glorot(rng, width, latent_dim)
    params["enc/mean/b"] = np.zeros(latent_dim)
    params["enc/var/W"] = glorot(rng, width, latent_dim)
    params["enc/var/b"] = np.zeros(latent_dim)
    return params


def init_decoder(latent_dim, hidden, output_dim, rng, head, noise_variance=None):
    """Decoder MLP; the gaussian head starts at ``noise_variance`` (softplus(0) if None)."""
    params = init_mlp(MlpSpec(latent_dim, hidden, output_dim), rng, "dec")
    if head.kind == "gaussian":
        if noise_variance is None:
            params["dec/noise_raw"] = np.zeros(())
        else:
            if noise_variance <= 0:
                raise ValueError("initial noise variance must be positive")
            # inverse softplus
            params["dec/noise_raw"] = np.array(noise_variance + np.log(-np.expm1(-noise_variance)))
    return params


def _n_layers(params, prefix):
    n = 0
    while f"{prefix}/W{n}" in params:
        n += 1
    return n


def mlp_forward(params, x, prefix, final_relu):
    n = _n_layers(params, prefix)
    h = x
    for i in range(n):
        h = nd.add(nd.matmul(h, params[f"{prefix}/W{i}"]), params[f"{prefix}/b{i}"])
        if i < n - 1 or final_relu:
            h = nd.relu(h)
    return h


def encode(x, phi):
    """Posterior q(z; x) for a batch (or single row) of inputs.

    ``phi`` maps names to arrays or Tensors.
    """
    x = nd._wrap(x)
    single = x.ndim == 1
    if single:
        x = nd.reshape(x, (1,) + x.shape)
    h = mlp_forward(phi, x, "enc", final_relu=True)
    mean = nd.add(nd.matmul(h, phi["enc/mean/W"]), phi["enc/mean/b"])
    var = nd.add(nd.softplus(nd.add(nd.matmul(h, phi["enc/var/W"]), phi["enc/var/b"])), VAR_FLOOR)
    if single:
        mean, var = mean[0], var[0]
    return DiagGaussian(mean, var)


def decode(z, theta):
    """Decoder output f(z): the mean (gaussian) or logits (bernoulli)."""
    z = nd._wrap(z)
    if z.ndim == 1:
        return mlp_forward(theta, nd.reshape(z, (1,) + z.shape), "dec", final_relu=False)[0]
    return mlp_forward(theta, z, "dec", final_relu=False)


def noise_variance(theta):
    return nd.softplus(theta["dec/noise_raw"])


def decode_loglik(x, z, theta, head):
    """log p(x | z), summed over the event axis."""
    xv = nd._value(x)
    if not np.all(np.isfinite(xv)):
        raise ValueError("observations must be finite")
    if head.kind == "bernoulli" and np.any((xv < 0) | (xv > 1)):
        raise ValueError("bernoulli likelihood requires observations in [0, 1]")
    out = decode(z, theta)
    if head.kind == "gaussian":
        var = noise_variance(theta)
        sq = nd.sum(nd.square(nd.sub(x, out)), axis=-1)
        D = xv.shape[-1]
        return nd.mul(-0.5, nd.add(nd.div(sq, var), nd.mul(float(D), nd.add(nd.log(var), LOG_2PI))))
    return nd.sum(nd.sub(nd.mul(x, out), nd.softplus(out)), axis=-1)


def decode_mean(z, theta, head):
    """Likelihood mean as a plain array (used for sampling and previews)."""
    out = nd._value(decode(z, theta))
    return out if head.kind == "gaussian" else 1.0 / (1.0 + np.exp(-out))

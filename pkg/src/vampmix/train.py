"""Alternating VI / Empirical-Bayes training with early stopping."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ndgrad as nd
from .dists import DiagGaussian, diag_gauss_sample
from .metrics import nmi_score
from .nets import LikelihoodHead, decode_loglik, encode, init_decoder, init_encoder
from .priors import (
    EM_KINDS, PRIOR_KINDS, MixturePrior, component_moments, em_update, init_prior, kl_to_prior,
    responsibilities, utilization,
)

log = logging.getLogger(__name__)

EARLY_STOP_METRICS = ("nmi", "elbo")
CHECKPOINT_MAGIC = b"VMMCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    prior: str = "vmm"
    n_components: int = 100
    latent_dim: int = 10
    hidden: tuple = (500, 500, 2000)
    batch_size: int = 256
    lr_vi: float = 1e-4
    lr_eb: float = 1e-4
    max_epochs: int = 10000
    patience: int = 100
    early_stop: str | None = None
    seed: int = 0
    n_kl_samples: int = 1
    likelihood: str = "gaussian"
    pseudo_transform: str | None = None
    fix_precision: bool = False
    zero_center_variance: bool = False
    gate_eliminated: bool = False
    precision_init: float | None = None
    eval_samples: int = 1
    # initial decoder variance: a float, "data" for the mean feature variance,
    # or None for softplus(0)
    noise_init: float | str | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.prior not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {self.prior!r}; expected one of {PRIOR_KINDS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr_vi >= 0 and self.lr_eb >= 0):
            raise ValueError("learning rates must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.early_stop is not None and self.early_stop not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop must be one of {EARLY_STOP_METRICS}")
        if self.n_kl_samples < 1:
            raise ValueError("n_kl_samples must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class VAEModel:
    """Encoder (phi), decoder (theta), likelihood head and latent prior."""

    def __init__(self, theta, phi, prior, head):
        self.theta = theta
        self.phi = phi
        self.prior = prior
        self.head = head

    @property
    def latent_dim(self):
        return self.prior.latent_dim

    def copy(self):
        return VAEModel(self.theta.copy(), self.phi.copy(), self.prior.copy(), self.head)

    def vi_store(self):
        """theta, phi and, for the VampPrior, its pseudo-inputs."""
        stores = [self.phi]
        if self.prior.kind == "vampprior":
            stores.append(self.prior.params)
        return self.theta.merged(*stores)

    def posterior(self, X):
        q = encode(np.asarray(X, dtype=np.float64), self.phi)
        return DiagGaussian(np.array(nd._value(q.mean)), np.array(nd._value(q.var)))

    def moments(self):
        return component_moments(self.prior, self.phi).numpy()

    def responsibilities(self, X):
        """Cluster memberships evaluated at posterior means."""
        return responsibilities(self.posterior(X).mean, self.prior, self.moments())


def init_model(config, X, rng, pseudo_transform="identity"):
    X = np.asarray(X, dtype=np.float64)
    D = X.shape[1]
    head = LikelihoodHead(config.likelihood)
    hidden = list(config.hidden)
    phi = nd.ParamStore(init_encoder(D, hidden, config.latent_dim, rng))
    noise = config.noise_init
    if noise == "data":
        noise = float(X.var(axis=0).mean())
    theta = nd.ParamStore(init_decoder(config.latent_dim, hidden[::-1], D, rng, head,
                                       noise_variance=noise))
    prior = init_prior(config.prior, config.n_components, config.latent_dim, X, rng, phi=phi,
                       pseudo_transform=config.pseudo_transform or pseudo_transform,
                       fix_precision=config.fix_precision,
                       zero_center_variance=config.zero_center_variance,
                       gate_eliminated=config.gate_eliminated,
                       precision_init=config.precision_init)
    return VAEModel(theta, phi, prior, head)


def _prior_moments_for_vi(model, view):
    # the VampPrior trains its pseudo-inputs and encoder through the prior;
    # the EM priors enter the VI objective as constants
    if model.prior.kind == "vampprior":
        return component_moments(model.prior, view, psi=view)
    return model.moments()


def elbo_terms(view, batch, model, eps):
    """Per-datum (log-likelihood, KL) Tensors for noise ``eps`` (S, M, p)."""
    q = encode(batch, view)
    z = nd.add(q.mean, nd.mul(nd.sqrt(q.var), eps))
    loglik = decode_loglik(batch, z[0], view, model.head)
    moments = _prior_moments_for_vi(model, view)
    kl = kl_to_prior(q, model.prior, moments, n_samples=eps.shape[0], z=z)
    return loglik, kl


def _draw_eps(rng, n, M, p):
    return rng.standard_normal((n, M, p))


def elbo_batch(batch, model, rng, n_kl_samples=1):
    """Summed ELBO of a batch with one reparameterized draw per datum."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or len(batch) == 0:
        raise ValueError("batch must be a non-empty M x D array")
    eps = _draw_eps(rng, n_kl_samples, len(batch), model.latent_dim)
    view = {k: model.vi_store()[k] for k in model.vi_store()}
    loglik, kl = elbo_terms(view, batch, model, eps)
    return float(nd._value(loglik).sum() - nd._value(kl).sum())


def vi_step(batch, model, adam, rng, n_kl_samples=1, where=""):
    """One Adam ascent step of the ELBO wrt theta and phi (and VampPrior u)."""
    batch = np.asarray(batch, dtype=np.float64)
    eps = _draw_eps(rng, n_kl_samples, len(batch), model.latent_dim)

    def loss(view):
        loglik, kl = elbo_terms(view, batch, model, eps)
        return nd.neg(nd.sum(nd.sub(loglik, kl)))

    value, grads = nd.value_and_grad(loss, model.vi_store())
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite ELBO {where}".strip())
    store = model.vi_store()
    nd.adam_step(adam, store, grads)
    return -value


def sample_posterior(batch, model, rng):
    q = model.posterior(batch)
    return nd._value(diag_gauss_sample(q, rng))


def validation_elbo(model, X, seed, n_samples=1):
    """Mean per-datum ELBO with a fixed noise stream, so it is reproducible."""
    rng = np.random.default_rng([int(seed), 7919])
    total = 0.0
    for start in range(0, len(X), 1024):
        total += elbo_batch(X[start:start + 1024], model, rng, n_samples)
    return total / len(X)


def validation_nmi(model, X, labels):
    r = model.responsibilities(X)
    return nmi_score(np.argmax(r, axis=1), labels)


@dataclass
class Checkpoint:
    model: VAEModel
    adam_vi: nd.AdamState
    adam_eb: nd.AdamState | None
    epoch: int
    best_metric: float
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def _mark_eliminated(model, X):
    if model.prior.uses_em:
        _, _, assign = utilization(model.responsibilities(X))
        model.prior.eliminated = ~np.isin(np.arange(model.prior.n_components), assign)


def train_loop(dataset, config, callback=None):
    """Fit a model on ``dataset.train``; early-stop on ``dataset.validation``.

    Each batch takes one VI step, draws fresh posterior samples, then (for the
    EM priors) one E-step/M-step.  Returns the best checkpoint and the
    per-epoch history.
    """
    X_train, X_val = dataset.train_features(), dataset.validation_features()
    y_val = dataset.validation_labels()
    metric = config.early_stop or ("nmi" if y_val is not None and config.prior != "standard-normal"
                                   else "elbo")
    if metric == "nmi" and y_val is None:
        raise ValueError("early_stop='nmi' needs validation labels")

    rng = np.random.default_rng(config.seed)
    model = init_model(config, X_train, rng, pseudo_transform=dataset.pseudo_transform)
    adam_vi = nd.AdamState(lr=config.lr_vi)
    adam_eb = nd.AdamState(lr=config.lr_eb) if model.prior.uses_em else None

    def evaluate():
        if metric == "nmi":
            return validation_nmi(model, X_val, y_val)
        return validation_elbo(model, X_val, config.seed, config.eval_samples)

    history = []
    best, best_state, since = -np.inf, None, 0
    N, M = len(X_train), config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for b, start in enumerate(range(0, N, M)):
            batch = X_train[order[start:start + M]]
            total += vi_step(batch, model, adam_vi, rng, config.n_kl_samples,
                             where=f"at epoch {epoch}, batch {b}")
            if model.prior.uses_em:
                z = sample_posterior(batch, model, rng)
                em_update(model.prior, z, model.phi, adam_eb)
        if config.gate_eliminated:
            _mark_eliminated(model, X_train)
        value = float(evaluate())
        record = {"epoch": epoch, "train_elbo": total / N, "val_metric": value}
        if model.prior.kind != "standard-normal":
            record["val_utilized"] = int(utilization(model.responsibilities(X_val))[0])
        history.append(record)
        if callback is not None:
            callback(record)
        log.info("epoch %d: train_elbo=%.4f val_%s=%.5f", epoch, record["train_elbo"], metric, value)
        if value > best:
            best, since = value, 0
            best_state = (epoch, model.copy(), _copy_adam(adam_vi), _copy_adam(adam_eb))
        else:
            since += 1
            if since >= config.patience:
                break

    epoch, best_model, best_vi, best_eb = best_state
    ckpt = Checkpoint(best_model, best_vi, best_eb, epoch, best,
                      config=config.to_dict(), meta={"early_stop": metric})
    return ckpt, history


def _copy_adam(state):
    if state is None:
        return None
    return nd.AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                        {k: v.copy() for k, v in state.m.items()},
                        {k: v.copy() for k, v in state.v.items()})


# ---------------------------------------------------------------- checkpoint IO

def _adam_arrays(prefix, state):
    out = {}
    if state is not None:
        for k, v in state.m.items():
            out[f"{prefix}/m/{k}"] = (v, True)
        for k, v in state.v.items():
            out[f"{prefix}/v/{k}"] = (v, True)
    return out


def _adam_meta(state):
    if state is None:
        return None
    return {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step}


def save_checkpoint(path, ckpt):
    """Write a manifest-prefixed container of little-endian float64 arrays."""
    model = ckpt.model
    arrays = {}
    for prefix, store in (("theta", model.theta), ("phi", model.phi), ("prior", model.prior.params)):
        for k in store:
            arrays[f"{prefix}/{k}"] = (store[k], store.is_trainable(k))
    arrays.update(_adam_arrays("adam_vi", ckpt.adam_vi))
    arrays.update(_adam_arrays("adam_eb", ckpt.adam_eb))
    for k, v in ckpt.extras.items():
        arrays[f"extra/{k}"] = (np.asarray(v, dtype=np.float64), False)

    entries, chunks, offset = [], [], 0
    for name, (arr, trainable) in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "trainable": bool(trainable)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    prior = model.prior
    manifest = {
        "format": "vampmix-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arrays": entries,
        "config": ckpt.config,
        "epoch": int(ckpt.epoch),
        "best_metric": float(ckpt.best_metric),
        "likelihood": model.head.kind,
        "prior": {"kind": prior.kind, "n_components": prior.n_components,
                  "latent_dim": prior.latent_dim, "data_dim": prior.data_dim,
                  "options": prior.options(), "eliminated": prior.eliminated.tolist()},
        "adam": {"vi": _adam_meta(ckpt.adam_vi), "eb": _adam_meta(ckpt.adam_eb)},
        "meta": ckpt.meta,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for c in chunks:
            f.write(c)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a vampmix checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    stores = {"theta": nd.ParamStore(), "phi": nd.ParamStore(), "prior": nd.ParamStore()}
    adam = {"adam_vi": ({}, {}), "adam_eb": ({}, {})}
    extras = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise ValueError(f"{path}: truncated payload for array {e['name']!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).reshape(shape)
        arr = arr.astype(np.float64)
        group, name = e["name"].split("/", 1)
        if group in stores:
            stores[group].add(name, arr, e["trainable"])
        elif group in adam:
            kind, pname = name.split("/", 1)
            adam[group][0 if kind == "m" else 1][pname] = arr
        elif group == "extra":
            extras[name] = arr
        else:
            raise ValueError(f"{path}: unknown array group {group!r}")
    pm = manifest["prior"]
    prior = MixturePrior(pm["kind"], pm["n_components"], pm["latent_dim"], stores["prior"],
                         data_dim=pm["data_dim"], **pm["options"])
    for k in stores["prior"]:
        prior.params.set_trainable(k, next(e["trainable"] for e in manifest["arrays"]
                                          if e["name"] == f"prior/{k}"))
    prior.eliminated = np.asarray(pm["eliminated"], dtype=bool)
    model = VAEModel(stores["theta"], stores["phi"], prior, LikelihoodHead(manifest["likelihood"]))

    def restore(key, meta):
        if meta is None:
            return None
        return nd.AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["step"],
                            adam[key][0], adam[key][1])

    return Checkpoint(model, restore("adam_vi", manifest["adam"]["vi"]),
                      restore("adam_eb", manifest["adam"]["eb"]), manifest["epoch"],
                      manifest["best_metric"], config=manifest["config"], meta=manifest["meta"],
                      extras=extras)

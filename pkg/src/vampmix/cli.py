"""Command-line entry point: ``vampmix fit|eval|sample``.

Run configs are flat ``key = value`` text files.  Keys are the
:class:`~vampmix.train.TrainConfig` fields plus a dataset source and a few
run options::

    # three Gaussian blobs in the plane
    synth = true
    synth_components = 3
    prior = vmm
    n_components = 25
    latent_dim = 2
    hidden = 64, 64
    out = runs/synth
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .data import SynthSpec, load_csv, load_idx, read_idx, split, synth_mixture
from .metrics import clustering_scores, model_report
from .priors import utilization
from .train import (TrainConfig, load_checkpoint, save_checkpoint, train_loop, validation_elbo,
                    validation_nmi)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
CLUSTERING_KEYS = ("nmi", "ari", "accuracy", "utilized_clusters", "n", "degenerate")
MODEL_KEYS = ("iw_log_marginal", "negative_distortion", "rate", "marginal_kl",
              "mutual_information", "marginal_kl_direct", "marginal_kl_gap_se", "elbo", "n")
MAX_PREVIEW = 10

RUN_DEFAULTS = {
    "out": "run",
    "idx_images": None,
    "idx_labels": None,
    "csv": None,
    "csv_labels": False,
    "synth": False,
    "synth_components": 3,
    "synth_dim": 2,
    "synth_points": 1000,
    "synth_scale": 1.0,
    "synth_separation": 8.0,
    "synth_seed": 0,
    "limit": None,
    "validation_fraction": 1.0 / 6.0,
    "split_seed": 0,
    "iw_samples": 100,
    "report_seed": 0,
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------- config

def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(key, text, default):
    if text.lower() in ("none", "null", ""):
        return None
    if key == "hidden":
        return tuple(int(h) for h in text.replace(",", " ").split())
    if key == "noise_init" and text == "data":
        return text
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or key in ("precision_init", "noise_init"):
        return float(text)
    if key == "limit":
        return int(text)
    return text


def _field_defaults():
    out = {}
    for f in dataclasses.fields(TrainConfig):
        out[f.name] = f.default
    out.update(RUN_DEFAULTS)
    return out


def parse_config(text, source="<config>"):
    """Parse a flat key=value config into a resolved dict of run options."""
    defaults = _field_defaults()
    resolved = dict(defaults)
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown field {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: field {key!r} already set on line {seen[key]}")
        try:
            resolved[key] = _coerce(key, value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        seen[key] = lineno
    _check_source(resolved, source)
    try:
        train_config(resolved)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return resolved


def _check_source(cfg, source):
    chosen = [name for name, on in (("idx_images", cfg["idx_images"] is not None),
                                    ("csv", cfg["csv"] is not None),
                                    ("synth", bool(cfg["synth"]))) if on]
    if not chosen:
        raise ConfigError(f"{source}: no dataset source; set one of idx_images, csv or synth")
    if len(chosen) > 1:
        raise ConfigError(f"{source}: several dataset sources given ({', '.join(chosen)})")
    if cfg["idx_labels"] is not None and cfg["idx_images"] is None:
        raise ConfigError(f"{source}: idx_labels given without idx_images")


def train_config(cfg):
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in names})


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), source=path)


def load_dataset(cfg):
    """Build the configured dataset and its train/validation split."""
    if cfg["synth"]:
        ds = synth_mixture(SynthSpec(cfg["synth_components"], cfg["synth_dim"],
                                     cfg["synth_points"], cfg["synth_scale"],
                                     cfg["synth_separation"], seed=cfg["synth_seed"]))
    elif cfg["csv"] is not None:
        ds = load_csv(cfg["csv"], labels=cfg["csv_labels"])
    else:
        ds = load_idx(cfg["idx_images"], cfg["idx_labels"], limit=cfg["limit"])
    if cfg["limit"] is not None and not cfg["idx_images"]:
        ds = dataclasses.replace(ds, features=ds.features[:cfg["limit"]],
                                 labels=None if ds.labels is None else ds.labels[:cfg["limit"]])
    return split(ds, cfg["validation_fraction"], cfg["split_seed"])


# -------------------------------------------------------------------- reports

def utilized_components(model, X):
    """Boolean mask of components that win the argmax for some row of X."""
    _, _, assign = utilization(model.responsibilities(X))
    mask = np.zeros(model.prior.n_components, dtype=bool)
    mask[assign] = True
    return mask


def exemplars(model, X):
    """For each component, the row of X it claims most confidently."""
    r = model.responsibilities(X)
    return X[np.argmax(r, axis=0)]


def early_stop_value(model, X, labels, metric, seed, eval_samples=1):
    if metric == "nmi":
        return None if labels is None else validation_nmi(model, X, labels)
    return validation_elbo(model, X, seed, eval_samples)


def build_metrics(model, X, labels, *, seed, iw_samples, early_stop, stop_seed=0,
                  eval_samples=1, extra=None):
    """Fixed-schema metrics dict; absent quantities are None.

    ``stop_seed`` drives the noise of an ELBO early-stop metric, so the value
    matches the one tracked during training.
    """
    clustering = dict.fromkeys(CLUSTERING_KEYS)
    if labels is not None:
        r = model.responsibilities(X)
        clustering.update(clustering_scores(np.argmax(r, axis=1), labels, r).to_dict())
    report = model_report(X, model, np.random.default_rng([int(seed), 1]),
                          iw_samples=iw_samples).to_dict()
    mask = utilized_components(model, X)
    out = {
        "clustering": clustering,
        "model": {k: report[k] for k in MODEL_KEYS},
        "utilized_components": int(mask.sum()),
        "utilized_mass": float(model.prior.weights()[mask].sum()),
        "early_stop": {"metric": early_stop,
                       "value": early_stop_value(model, X, labels, early_stop, stop_seed,
                                                 eval_samples)},
        "epoch": None,
        "best_metric": None,
    }
    out.update(extra or {})
    return out


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


# ------------------------------------------------------------------ commands

def cmd_fit(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    config = train_config(cfg)
    ds = load_dataset(cfg)
    os.makedirs(cfg["out"], exist_ok=True)

    ckpt, history = train_loop(ds, config)
    model = ckpt.model
    X_tr, X_val = ds.train_features(), ds.validation_features()
    mask = utilized_components(model, X_val)
    ckpt.extras["exemplars"] = exemplars(model, X_tr)
    ckpt.extras["utilized"] = mask.astype(np.float64)
    ckpt.meta.update({
        "image_shape": list(ds.image_shape) if ds.image_shape else None,
        "data_dim": int(ds.features.shape[1]),
        "run": _echo(cfg),
    })
    save_checkpoint(os.path.join(cfg["out"], CHECKPOINT_NAME), ckpt)

    metrics = build_metrics(model, X_val, ds.validation_labels(), seed=cfg["report_seed"],
                            iw_samples=cfg["iw_samples"], early_stop=ckpt.meta["early_stop"],
                            stop_seed=config.seed, eval_samples=config.eval_samples,
                            extra={"epoch": int(ckpt.epoch), "best_metric": ckpt.best_metric})
    write_json(os.path.join(cfg["out"], "history.json"), history)
    write_json(os.path.join(cfg["out"], "metrics.json"), metrics)
    write_json(os.path.join(cfg["out"], "run_config.json"), _echo(cfg))
    return 0


def _echo(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def _is_idx(path):
    try:
        read_idx(path)
    except (ValueError, OSError):
        return False
    return True


def _eval_dataset(ckpt, data, labels_column, fold):
    if not data:
        run = ckpt.meta.get("run")
        if run is None:
            raise ValueError("checkpoint has no run record; pass a dataset explicitly")
        ds = load_dataset(run)
        if fold == "train":
            return ds.train_features(), ds.train_labels()
        return ds.validation_features(), ds.validation_labels()
    if len(data) > 2:
        raise ValueError("expected at most two data paths (IDX images and labels)")
    if _is_idx(data[0]):
        ds = load_idx(data[0], data[1] if len(data) > 1 else None)
    else:
        if len(data) > 1:
            raise ValueError("a CSV dataset is a single file")
        ds = load_csv(data[0], labels=labels_column)
    return ds.features, ds.labels


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    X, y = _eval_dataset(ckpt, args.data, args.labels, args.fold)
    expected = ckpt.model.prior.data_dim
    if X.shape[1] != expected:
        raise ValueError(f"data has {X.shape[1]} features but the checkpoint expects {expected}")
    run = ckpt.meta.get("run", {})
    seed = run.get("report_seed", 0) if args.seed is None else args.seed
    metrics = build_metrics(ckpt.model, X, y, seed=seed,
                            iw_samples=run.get("iw_samples", args.iw_samples),
                            early_stop=ckpt.meta.get("early_stop", "elbo"),
                            stop_seed=ckpt.config.get("seed", 0),
                            eval_samples=ckpt.config.get("eval_samples", 1),
                            extra={"epoch": int(ckpt.epoch), "best_metric": ckpt.best_metric})
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "metrics.json"), metrics)
    return 0


def _to_pixels(x):
    return np.rint((np.clip(x, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def preview_grid(columns, image_shape):
    """One column per component: its exemplar in the bottom row, samples
    stacked upward from just above it; unused cells stay black."""
    h, w = image_shape
    grid = np.zeros(((1 + MAX_PREVIEW) * h, max(1, len(columns)) * w), dtype=np.uint8)
    bottom = MAX_PREVIEW * h
    for c, col in enumerate(columns):
        cols = slice(c * w, (c + 1) * w)
        if col["exemplar"] is not None:
            grid[bottom:bottom + h, cols] = _to_pixels(col["exemplar"]).reshape(h, w)
        for s, img in enumerate(col["samples"]):
            top = bottom - (s + 1) * h
            grid[top:top + h, cols] = _to_pixels(img).reshape(h, w)
    return grid


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def cmd_sample(args):
    from .priors import prior_predictive_sample

    ckpt = load_checkpoint(args.checkpoint)
    shape = ckpt.meta.get("image_shape")
    if not shape:
        raise ValueError("checkpoint was not trained on image data; nothing to draw")
    model = ckpt.model
    mask = ckpt.extras.get("utilized")
    comps = (np.flatnonzero(mask > 0.5) if mask is not None
             else np.arange(model.prior.n_components))
    seed = 0 if args.seed is None else args.seed
    columns = prior_predictive_sample(model.prior, model.moments(), model.theta, model.head,
                                      np.random.default_rng(seed), components=comps,
                                      exemplars=ckpt.extras.get("exemplars"))
    output = args.output if args.out is None else os.path.join(args.out, args.output)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
    write_pgm(output, preview_grid(columns, tuple(shape)))
    sidecar = os.path.splitext(output)[0] + ".json"
    write_json(sidecar, {"columns": [{"component": c["component"], "pi": c["weight"],
                                      "n_samples": len(c["samples"])} for c in columns],
                         "image_shape": list(shape)})
    return 0


# ----------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(prog="vampmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="train a model from a config file")
    fit.add_argument("config")
    fit.add_argument("--seed", type=int, help="override the config seed")
    fit.add_argument("--out", help="override the output directory")
    fit.set_defaults(func=cmd_fit)

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset")
    ev.add_argument("checkpoint")
    ev.add_argument("data", nargs="*",
                    help="IDX images [labels] or a CSV file; omit to reuse the run's own split")
    ev.add_argument("--labels", action="store_true", help="CSV has a final label column")
    ev.add_argument("--fold", choices=("validation", "train"), default="validation")
    ev.add_argument("--iw-samples", type=int, default=100)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    sm = sub.add_parser("sample", help="write a prior-predictive PGM grid")
    sm.add_argument("checkpoint")
    sm.add_argument("output")
    sm.add_argument("--seed", type=int)
    sm.add_argument("--out", help="directory for the grid and its sidecar")
    sm.set_defaults(func=cmd_sample)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

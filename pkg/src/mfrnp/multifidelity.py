"""Multi-fidelity residual Neural Process: aggregation, residual training, inference.

Surrogates ``1 .. K-1`` model their own fidelity.  Their predictions at the
top-level inputs are interpolated to the finest grid and averaged; surrogate
``K`` learns the residual between that aggregate and the top-level data.
Because the residual targets are rebuilt inside the autodiff graph every
epoch, the residual objective also trains the lower-fidelity decoders.

Every surrogate works in its own normalized space (see
:class:`mfrnp.normalization.NormStats`).  Lower-fidelity predictions are
mapped to physical units before interpolation and into the top level's
normalized space after aggregation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mfrnp import neural_process as nproc
from mfrnp.errors import ConfigurationError, InputError, StateError, TrainingError
from mfrnp.neural_process import LatentGaussian, NPSurrogate
from mfrnp.nn import autodiff as ad
from mfrnp.nn.optim import AdamState, adam_step, clip_by_global_norm, lr_schedule
from mfrnp.normalization import NormStats
from mfrnp.pde import FidelitySpec, GridField
from mfrnp.rng import substream

log = logging.getLogger(__name__)

MIN_IMPROVEMENT = 1e-6


# interpolation ------------------------------------------------------------------

def linear_interp_matrix(n_src, n_dst):
    """``(n_dst, n_src)`` matrix of 1-D linear interpolation between node grids on [0, 1].

    Node ``j`` of an ``n``-node grid sits at ``j / (n - 1)``.  Positions are
    computed in integer arithmetic so coincident nodes get a single weight of
    exactly 1.
    """
    if n_src < 2 or n_dst < 2:
        raise InputError("interpolation needs at least two nodes per axis")
    M = np.zeros((n_dst, n_src))
    den = n_dst - 1
    for j in range(n_dst):
        num = j * (n_src - 1)
        lo, rem = divmod(num, den)
        if rem == 0:
            M[j, lo] = 1.0
        else:
            frac = rem / den
            M[j, lo] = 1.0 - frac
            M[j, lo + 1] = frac
    return M


_MATRIX_CACHE = {}


def _matrices(src, dst):
    key = (tuple(src), tuple(dst))
    if key not in _MATRIX_CACHE:
        _MATRIX_CACHE[key] = (linear_interp_matrix(src[0], dst[0]), linear_interp_matrix(src[1], dst[1]))
    return _MATRIX_CACHE[key]


def interpolate_batch(values, src, dst):
    """Bilinear resampling of flattened grids ``(N, H*W)`` from ``src`` to ``dst`` resolution."""
    src, dst = tuple(src), tuple(dst)
    if src == dst:
        return ad.as_tensor(values)
    left, right = _matrices(src, dst)
    return ad.separable_map(values, left, right, src)


def interpolate_grid(field_, target):
    """Bilinear interpolation of a :class:`GridField` onto a ``target`` node grid."""
    src = field_.resolution
    if min(src) < 2 or min(target) < 2:
        raise InputError(f"degenerate resolution {src} -> {target}")
    if tuple(target) == tuple(src):
        return GridField(field_.values.copy())
    out = interpolate_batch(field_.flat()[None, :], src, target).data
    return GridField(out.reshape(target))


def aggregate(preds, weights):
    """Pointwise ``sum_k weights[k] * preds[k]``.

    ``preds`` may be grid fields, arrays or tensors of identical shape.
    """
    weights = np.asarray(weights, dtype=float)
    if len(preds) != len(weights) or len(preds) == 0:
        raise ConfigurationError(f"{len(preds)} predictions but {len(weights)} weights")
    if isinstance(preds[0], GridField):
        shapes = {p.resolution for p in preds}
        if len(shapes) != 1:
            raise ConfigurationError(f"aggregating fields of different resolution: {shapes}")
        return GridField(sum(w * p.values for w, p in zip(weights, preds)))
    shapes = {tuple(np.shape(getattr(p, "data", p))) for p in preds}
    if len(shapes) != 1:
        raise ConfigurationError(f"aggregating predictions of different shape: {shapes}")
    if len(preds) == 1 and weights[0] == 1.0:
        return preds[0]
    total = ad.mul(preds[0], weights[0])
    for w, p in zip(weights[1:], preds[1:]):
        total = total + ad.mul(p, w)
    return total


# model ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 50000
    patience: int = 10000
    lr: float = 1e-3
    decay: float = 0.85
    decay_step: int = 10000
    context_fraction: tuple = (0.20, 0.25)
    samples: int = 1
    loss_weights: list | None = None
    val_fraction: float = 0.10
    seed: int = 0
    clip_norm: float | None = 10.0
    eval_every: int = 10
    detach_lower: bool = False
    frozen: tuple = ()

    def __post_init__(self):
        lo, hi = self.context_fraction
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigurationError("context fraction bounds must satisfy 0 < lo <= hi < 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("validation fraction must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.samples < 1 or self.eval_every < 1:
            raise ConfigurationError("epochs, patience, samples and eval_every must be positive")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.context_fraction = (float(lo), float(hi))
        self.frozen = tuple(self.frozen)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "context_fraction" in d:
            d["context_fraction"] = tuple(d["context_fraction"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["context_fraction"] = list(self.context_fraction)
        d["frozen"] = list(self.frozen)
        return d


def default_loss_weights(K, top=2.0, lower=1.0):
    return np.array([lower] * (K - 1) + [top], dtype=float)


@dataclass
class MFModel:
    """Ordered surrogates (level 1 lowest) plus aggregation and loss weights.

    A single-level model is the SF-NP baseline: it has no aggregate and its
    one surrogate learns the data directly.
    """

    surrogates: list
    specs: list
    weights: np.ndarray | None = None
    loss_weights: np.ndarray | None = None
    scalings: list | None = None
    latents: list | None = None
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        K = len(self.surrogates)
        if K < 1 or len(self.specs) != K:
            raise ConfigurationError("need one fidelity spec per surrogate")
        for k, (s, spec) in enumerate(zip(self.surrogates, self.specs)):
            if s.d_y != spec.size:
                raise ConfigurationError(f"surrogate {k + 1} outputs {s.d_y} values, grid {spec.resolution} has {spec.size}")
        for a, b in zip(self.specs[:-1], self.specs[1:]):
            if b.level <= a.level or b.resolution[0] < a.resolution[0] or b.resolution[1] < a.resolution[1]:
                raise ConfigurationError("fidelity levels must increase with non-decreasing resolution")
        if self.weights is None:
            self.weights = np.full(K - 1, 1.0 / (K - 1)) if K > 1 else np.zeros(0)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != K - 1:
            raise ConfigurationError(f"{K} fidelities need {K - 1} aggregation weights")
        if K > 1 and (np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12):
            raise ConfigurationError("aggregation weights must be positive and sum to 1")
        if self.loss_weights is None:
            self.loss_weights = default_loss_weights(K)
        self.loss_weights = np.asarray(self.loss_weights, dtype=float)
        if len(self.loss_weights) != K or np.any(self.loss_weights <= 0):
            raise ConfigurationError("need one positive loss weight per fidelity")
        if self.scalings is not None and len(self.scalings) != K:
            raise ConfigurationError("need one NormStats per fidelity")

    @classmethod
    def create(cls, specs, d_x, rng, hidden=32, depth=3, d_z=None, **kwargs):
        surrogates = [NPSurrogate.create(d_x, spec.size, rng, hidden=hidden, depth=depth, d_z=d_z) for spec in specs]
        return cls(surrogates, list(specs), **kwargs)

    @property
    def K(self):
        return len(self.surrogates)

    @property
    def top(self):
        return self.surrogates[-1]

    def parameters(self, frozen=()):
        return [p for k, s in enumerate(self.surrogates) if k not in frozen for p in s.parameters()]

    # conversions between fidelity spaces
    def _scaling(self, k):
        if self.scalings is None or self.scalings[k].is_identity:
            return None
        return self.scalings[k]

    def inputs_for(self, k, X_top):
        """Top-level (normalized) inputs expressed in fidelity ``k``'s input space."""
        if self.scalings is None or k == self.K - 1:
            return X_top
        return self.scalings[k].apply_x(self.scalings[-1].invert_x(X_top))

    def to_physical(self, k, Y):
        s = self._scaling(k)
        return Y if s is None else ad.mul(Y, s.y_std) + s.y_mean

    def to_top(self, Y):
        s = self._scaling(self.K - 1)
        return Y if s is None else ad.mul(Y - s.y_mean, 1.0 / s.y_std)


# ancestral sampling ------------------------------------------------------------

def _draw_rows(g, n, rng, mode):
    if mode == "mean":
        return ad.add(np.zeros((n, 1)), g.mean)
    return nproc.sample_latent(g, rng, n)


def ancestral_lower_predictions(model, X_top, rng, mode="resampled", priors=None):
    """Decode every lower surrogate at the top-level inputs and resample to the top grid.

    ``mode`` selects the latent source: ``"resampled"`` draws from ``priors``
    (the current context encodings), ``"cached"`` from the latents stored after
    training, ``"mean"`` uses the latent means.  One latent is drawn per input
    row.  Returned tensors are ``(N, H_K * W_K)`` in physical units.
    """
    K = model.K
    if K < 2:
        raise ConfigurationError("ancestral sampling needs at least two fidelities")
    if mode == "resampled":
        if priors is None or len(priors) < K - 1:
            raise ConfigurationError("resampled mode needs a prior latent for each lower fidelity")
        sources = priors
    elif mode in ("cached", "mean"):
        if model.latents is None:
            raise StateError("model has no cached latents; train it first")
        sources = model.latents
    else:
        raise ConfigurationError(f"unknown ancestral mode {mode!r}")
    X_top = np.asarray(X_top, dtype=float)
    n = len(X_top)
    top_res = model.specs[-1].resolution
    out = []
    for k in range(K - 1):
        sur = model.surrogates[k]
        z = _draw_rows(sources[k], n, rng, mode)
        pred = sur.decode(z, model.inputs_for(k, X_top))
        pred = model.to_physical(k, pred)
        out.append(interpolate_batch(pred, model.specs[k].resolution, top_res))
    return out


@dataclass
class ResidualDataset:
    X: np.ndarray
    R: ad.Tensor

    def __len__(self):
        return len(self.X)


def aggregation_top(model, X_top, rng, mode="resampled", priors=None):
    """Aggregated lower-fidelity prediction in the top level's normalized space."""
    preds = ancestral_lower_predictions(model, X_top, rng, mode, priors)
    return model.to_top(aggregate(preds, model.weights))


def build_residual_dataset(model, X_top, Y_top, rng, mode="resampled", priors=None, detach=False):
    """Residual targets ``Y_K - aggregate`` for the top-level data, rebuilt on every call."""
    if len(X_top) == 0:
        raise InputError("top-level dataset is empty")
    agg = aggregation_top(model, X_top, rng, mode, priors)
    if detach:
        agg = agg.detach()
    return ResidualDataset(np.asarray(X_top, dtype=float), ad.sub(Y_top, agg))


# objective ------------------------------------------------------------------------

def _split(n, config, rng):
    lo, hi = config.context_fraction
    fraction = lo if lo == hi else rng.uniform(lo, hi)
    return nproc.split_context_target(n, fraction, rng)


def _fidelity_elbo(sur, X, Y, config, split_rng, noise_rng):
    sp = _split(len(X), config, split_rng)
    Y = ad.as_tensor(Y)
    context = (X[sp.context], ad.take(Y, sp.context))
    target = (X[sp.target], ad.take(Y, sp.target))
    return nproc.elbo_terms(sur, context, target, config.samples, noise_rng)


def mfrnp_loss(model, datasets, config, rng, noise_rng=None):
    """Weighted negative R-ELBO ``L^R + L^f`` for one epoch.

    ``datasets`` holds one ``(X, Y)`` pair per fidelity, already normalized.
    ``rng`` drives the context/target splits, ``noise_rng`` (default ``rng``)
    the latent draws.  Returns the scalar loss tensor and per-fidelity floats;
    ``diag["terms"]`` keeps the weighted residual and lower-level loss tensors.
    """
    noise_rng = rng if noise_rng is None else noise_rng
    K = model.K
    if len(datasets) != K:
        raise ConfigurationError(f"{K} fidelities but {len(datasets)} datasets")
    for k, (X, _) in enumerate(datasets):
        if len(X) == 0:
            raise InputError(f"dataset for fidelity {k + 1} is empty")
    lam = model.loss_weights
    per_fidelity = []
    priors = []
    lower = None
    for k in range(K - 1):
        X, Y = datasets[k]
        terms = _fidelity_elbo(model.surrogates[k], X, Y, config, rng, noise_rng)
        priors.append(terms["prior"])
        per_fidelity.append(float(terms["loss"].data))
        weighted = ad.mul(terms["loss"], lam[k])
        lower = weighted if lower is None else lower + weighted
    X_top, Y_top = datasets[-1]
    if K > 1:
        res = build_residual_dataset(model, X_top, Y_top, noise_rng, "resampled", priors, config.detach_lower)
        targets = res.R
    else:
        targets = Y_top
    terms = _fidelity_elbo(model.top, X_top, targets, config, rng, noise_rng)
    residual = ad.mul(terms["loss"], lam[-1])
    per_fidelity.append(float(terms["loss"].data))
    total = residual if lower is None else residual + lower
    diag = {
        "fidelity_losses": per_fidelity,
        "residual_loss": float(residual.data),
        "lower_loss": 0.0 if lower is None else float(lower.data),
        "loss": float(total.data),
        "terms": {"residual": residual, "lower": lower},
    }
    return total, diag


# latents, inference --------------------------------------------------------------

def compute_latents(model, datasets, rng, mode="cached"):
    """Encode each fidelity's full training set; the top level encodes its residuals.

    ``mode="mean"`` builds the residuals from latent means (deterministic).
    """
    latents = []
    for k in range(model.K - 1):
        X, Y = datasets[k]
        latents.append(model.surrogates[k].encode(X, Y).detach())
    X_top, Y_top = datasets[-1]
    if model.K > 1:
        saved = model.latents
        model.latents = latents
        try:
            R = build_residual_dataset(model, X_top, Y_top, rng, mode, detach=True).R
        finally:
            model.latents = saved
    else:
        R = ad.as_tensor(Y_top)
    latents.append(model.top.encode(X_top, R.detach()).detach())
    return latents


def predict(model, X_top, rng=None, S=1, use_mean=False):
    """Residual-corrected prediction at top-level inputs (normalized space).

    Averages ``S`` ancestral draws; returns ``(mean, spread)`` where spread is
    the per-entry standard deviation across draws.  ``use_mean`` replaces every
    latent draw with its mean.
    """
    if model.latents is None:
        raise StateError("model has no cached latents; train it first")
    if rng is None and not use_mean:
        raise InputError("sampling prediction needs an rng")
    X_top = np.asarray(X_top, dtype=float)
    mode = "mean" if use_mean else "cached"
    draws = []
    for _ in range(1 if use_mean else S):
        z_top = _draw_rows(model.latents[-1], len(X_top), rng, mode)
        out = model.top.decode(z_top, X_top)
        if model.K > 1:
            out = aggregation_top(model, X_top, rng, mode) + out
        draws.append(out.data)
    draws = np.array(draws)
    return draws.mean(axis=0), draws.std(axis=0)


# training ---------------------------------------------------------------------

def _validation_split(n, fraction, rng):
    n_val = int(round(fraction * n))
    if n_val == 0:
        return np.arange(n), np.zeros(0, dtype=int)
    if n - n_val < 2:
        raise InputError("too few top-level samples to hold out a validation set")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def validation_loss(model, train_sets, X_val, Y_val, rng):
    """Mean squared error of the latent-mean prediction on held-out top-level data."""
    saved = model.latents
    model.latents = compute_latents(model, train_sets, rng, mode="mean")
    try:
        mean, _ = predict(model, X_val, use_mean=True)
    finally:
        model.latents = saved
    return float(np.mean((mean - Y_val) ** 2))


def train(model, datasets, config):
    """Fit all surrogates jointly; a one-level model trains as a plain NP.

    Each epoch resplits every fidelity, rebuilds the residual set, and takes
    one Adam step on the combined loss.  A fraction of the top-level data is
    held out for early stopping; the best parameters are restored, and the
    latents are cached from the full training sets.  Returns ``(model, history)``.
    """
    datasets = [(np.asarray(X, float), np.asarray(Y, float)) for X, Y in datasets]
    if len(datasets) != model.K:
        raise ConfigurationError(f"{model.K} fidelities but {len(datasets)} datasets")
    for k, (X, Y) in enumerate(datasets):
        if len(X) < 2:
            raise InputError(f"fidelity {k + 1} needs at least two samples")
    if config.loss_weights is not None:
        model.loss_weights = np.asarray(config.loss_weights, dtype=float)
    split_rng = substream(config.seed, "split")
    noise_rng = substream(config.seed, "latent")
    val_rng = substream(config.seed, "validation")

    X_top, Y_top = datasets[-1]
    tr_idx, val_idx = _validation_split(len(X_top), config.val_fraction, val_rng)
    train_sets = datasets[:-1] + [(X_top[tr_idx], Y_top[tr_idx])]
    has_val = len(val_idx) > 0
    X_val, Y_val = X_top[val_idx], Y_top[val_idx]

    params = model.parameters(config.frozen)
    state = AdamState.for_params(params, lr=config.lr)
    best, best_epoch, snapshot = math.inf, 0, [p.data.copy() for p in params]
    history = []
    for epoch in range(config.max_epochs):
        record = {"epoch": epoch}
        if epoch % config.eval_every == 0:
            val = validation_loss(model, train_sets, X_val, Y_val, noise_rng) if has_val else None
            record["val_loss"] = val
            if val is not None:
                if not math.isfinite(val):
                    raise TrainingError(f"validation loss became non-finite at epoch {epoch}")
                if val < best - MIN_IMPROVEMENT:
                    best, best_epoch = val, epoch
                    snapshot = [p.data.copy() for p in params]
                elif epoch - best_epoch >= config.patience:
                    history.append(record)
                    break
        loss, diag = mfrnp_loss(model, train_sets, config, split_rng, noise_rng)
        bad = [k + 1 for k, v in enumerate(diag["fidelity_losses"]) if not math.isfinite(v)]
        if bad:
            raise TrainingError(f"non-finite loss at epoch {epoch} from fidelity {bad}")
        grads = ad.grad(loss, params)
        grads, gnorm = clip_by_global_norm(grads, config.clip_norm)
        lr = lr_schedule(config.lr, epoch, config.decay, config.decay_step)
        new_values, state = adam_step([p.data for p in params], grads, state, lr=lr)
        for p, v in zip(params, new_values):
            p.data = v
        record.update(loss=diag["loss"], fidelity_losses=diag["fidelity_losses"], lr=lr, grad_norm=gnorm)
        history.append(record)
        if epoch % 500 == 0:
            log.info("epoch %d loss %.4g val %s", epoch, diag["loss"], record.get("val_loss"))
    if has_val:
        for p, v in zip(params, snapshot):
            p.data = v
    model.latents = compute_latents(model, train_sets, substream(config.seed, "cache"))
    model.history = history
    return model, history


# checkpoints --------------------------------------------------------------------

def save_model(model, directory):
    """One surrogate checkpoint per fidelity plus ``mf_meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, sur in enumerate(model.surrogates):
        nproc.save_surrogate(sur, d / f"surrogate_{k + 1}.npz")
    meta = {
        "K": model.K,
        "specs": [{"level": s.level, "resolution": list(s.resolution), "cost": s.cost} for s in model.specs],
        "weights": model.weights.tolist(),
        "loss_weights": model.loss_weights.tolist(),
        "latents": None if model.latents is None else [g.to_dict() for g in model.latents],
        "normalization": None if model.scalings is None else [s.to_dict() for s in model.scalings],
    }
    (d / "mf_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(directory):
    d = Path(directory)
    meta = json.loads((d / "mf_meta.json").read_text())
    surrogates = [nproc.load_surrogate(d / f"surrogate_{k + 1}.npz") for k in range(meta["K"])]
    specs = [FidelitySpec(s["level"], tuple(s["resolution"]), s.get("cost")) for s in meta["specs"]]
    latents = None if meta["latents"] is None else [LatentGaussian.from_dict(g) for g in meta["latents"]]
    scalings = None if meta["normalization"] is None else [NormStats.from_dict(s) for s in meta["normalization"]]
    return MFModel(surrogates, specs, np.array(meta["weights"]), np.array(meta["loss_weights"]), scalings, latents)

"""Latent-variable Neural Process for one fidelity level.

Context pairs ``(x, y)`` are encoded row-wise, mean-pooled and mapped to a
diagonal Gaussian over the latent ``z``.  The decoder maps ``(x, z)`` to the
predictive mean; a single learned log-variance is shared by every output
coordinate.  On its own this is the single-fidelity (SF-NP) baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mfrnp.errors import ConfigurationError, InputError
from mfrnp.nn import autodiff as ad
from mfrnp.nn.dense import DenseNet

LOGVAR_MIN = -10.0
LOGVAR_MAX = 3.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentGaussian:
    mean: ad.Tensor
    logvar: ad.Tensor

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.logvar = ad.as_tensor(self.logvar)

    @property
    def dim(self):
        return self.mean.shape[-1]

    def detach(self):
        return LatentGaussian(self.mean.detach(), self.logvar.detach())

    def to_dict(self):
        return {"mean": self.mean.data.tolist(), "logvar": self.logvar.data.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["logvar"], dtype=float))


@dataclass
class ContextTargetSplit:
    context: np.ndarray
    target: np.ndarray


class NPSurrogate:
    """Encoder, latent heads, decoder and observation noise for one fidelity."""

    def __init__(self, encoder, mean_head, logvar_head, decoder, obs_logvar=0.0, d_x=None, d_y=None):
        self.encoder = encoder
        self.mean_head = mean_head
        self.logvar_head = logvar_head
        self.decoder = decoder
        self.obs_logvar = obs_logvar if isinstance(obs_logvar, ad.Tensor) else ad.parameter(np.array(obs_logvar, dtype=float))
        self.d_x = d_x if d_x is not None else decoder.in_dim - mean_head.out_dim
        self.d_y = d_y if d_y is not None else decoder.out_dim
        self.d_r = encoder.out_dim
        self.d_z = mean_head.out_dim
        if encoder.in_dim != self.d_x + self.d_y:
            raise ConfigurationError("encoder input must be d_x + d_y")
        if mean_head.in_dim != self.d_r or logvar_head.in_dim != self.d_r:
            raise ConfigurationError("latent heads must take the encoder output")
        if logvar_head.out_dim != self.d_z or decoder.in_dim != self.d_x + self.d_z:
            raise ConfigurationError("decoder input must be d_x + d_z")
        if decoder.out_dim != self.d_y:
            raise ConfigurationError("decoder output must be d_y")

    @classmethod
    def create(cls, d_x, d_y, rng, hidden=32, depth=3, d_z=None, activation="relu"):
        """Glorot-initialized surrogate; ``d_r == d_z == hidden`` unless overridden."""
        d_z = d_z or hidden
        enc = DenseNet.initialize([d_x + d_y] + [hidden] * depth + [d_z], rng, activation)
        mean_head = DenseNet.initialize([d_z, d_z], rng, "identity")
        logvar_head = DenseNet.initialize([d_z, d_z], rng, "identity")
        dec = DenseNet.initialize([d_x + d_z] + [hidden] * depth + [d_y], rng, activation)
        return cls(enc, mean_head, logvar_head, dec, 0.0, d_x, d_y)

    def parameters(self):
        return (
            self.encoder.parameters()
            + self.mean_head.parameters()
            + self.logvar_head.parameters()
            + self.decoder.parameters()
            + [self.obs_logvar]
        )

    def observation_logvar(self):
        return ad.clip(self.obs_logvar, LOGVAR_MIN, LOGVAR_MAX)

    def encode(self, X, Y):
        return encode(self, X, Y)

    def decode(self, z, X):
        return decode(self, z, X)

    def save(self, path):
        save_surrogate(self, path)

    @classmethod
    def load(cls, path):
        return load_surrogate(path)


def _canonical_order(X, Y):
    # lexicographic row order so pooled sums do not depend on input order
    keys = np.column_stack([X, Y.sum(axis=1)])
    order = np.lexsort(keys.T[::-1])
    k = keys[order]
    if len(k) > 1 and np.any(np.all(k[1:] == k[:-1], axis=1)):
        rows = np.concatenate([X, Y], axis=1)
        order = np.lexsort(rows.T[::-1])
    return order


def encode(np_, X, Y):
    """Latent Gaussian from a context set given as row-aligned ``X`` and ``Y``."""
    X = ad.as_tensor(X)
    Y = ad.as_tensor(Y)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise InputError("context must be row-aligned 2-D arrays")
    if len(X) == 0:
        raise InputError("cannot encode an empty context set")
    if X.shape[1] != np_.d_x or Y.shape[1] != np_.d_y:
        raise ConfigurationError(
            f"context dims ({X.shape[1]}, {Y.shape[1]}) do not match surrogate ({np_.d_x}, {np_.d_y})"
        )
    order = _canonical_order(X.data, Y.data)
    pairs = ad.concat([ad.take(X, order), ad.take(Y, order)], axis=1)
    r = np_.encoder(pairs).mean(axis=0)
    mean = np_.mean_head(r)
    logvar = ad.clip(np_.logvar_head(r), LOGVAR_MIN, LOGVAR_MAX)
    return LatentGaussian(mean, logvar)


def sample_latent(g, rng, S=1, eps=None):
    """``S`` reparameterized draws ``mean + exp(logvar / 2) * eps``, shape ``(S, d_z)``."""
    if S < 1:
        raise InputError("need at least one latent sample")
    if eps is None:
        eps = rng.standard_normal((S, g.dim))
    return g.mean + ad.exp(g.logvar * 0.5) * eps


def decode(np_, z, X):
    """Predictive mean for inputs ``X`` (N, d_x) under latent ``z``.

    ``z`` is a single vector shared by every row, or one row per input.
    """
    X = ad.as_tensor(X)
    z = ad.as_tensor(z)
    squeeze = X.ndim == 1
    if squeeze:
        X = ad.reshape(X, (1, -1))
    if X.shape[1] != np_.d_x or z.shape[-1] != np_.d_z:
        raise ConfigurationError(f"decode dims x={X.shape[1]}, z={z.shape[-1]} vs ({np_.d_x}, {np_.d_z})")
    if z.ndim == 1:
        z = ad.add(np.zeros((len(X), 1)), z)
    elif len(z) != len(X):
        raise ConfigurationError("per-row latents must match the number of inputs")
    out = np_.decoder(ad.concat([X, z], axis=1))
    return ad.reshape(out, (-1,)) if squeeze else out


def gaussian_loglik(y, mean, logvar):
    """Sum over entries of ``log N(y | mean, exp(logvar))`` with scalar ``logvar``."""
    y = ad.as_tensor(y)
    logvar = ad.as_tensor(logvar)
    n = y.size
    sq = ad.square(ad.sub(y, mean)).sum()
    return -0.5 * n * LOG_2PI - 0.5 * n * logvar - 0.5 * sq * ad.exp(-logvar)


def gaussian_kl(q, p):
    """KL(q || p) for diagonal Gaussians, summed over coordinates."""
    if q.dim != p.dim:
        raise ConfigurationError("KL between Gaussians of different dimension")
    var_ratio = ad.exp(q.logvar - p.logvar)
    mahal = ad.square(q.mean - p.mean) * ad.exp(-p.logvar)
    return 0.5 * (var_ratio + mahal - 1.0 - (q.logvar - p.logvar)).sum()


def _as_xy(data):
    X, Y = data
    return ad.as_tensor(X), ad.as_tensor(Y)


def elbo_terms(np_, context, target, S, rng, prior=None):
    """Negative ELBO plus the pieces callers need (prior, posterior, terms).

    ``context`` and ``target`` are ``(X, Y)`` pairs; ``Y`` may carry gradients.
    """
    Xc, Yc = _as_xy(context)
    Xt, Yt = _as_xy(target)
    if len(Xc) == 0 or len(Xt) == 0:
        raise InputError("ELBO needs non-empty context and target sets")
    if prior is None:
        prior = encode(np_, Xc, Yc)
    posterior = encode(np_, ad.concat([Xc, Xt], axis=0), ad.concat([Yc, Yt], axis=0))
    z = sample_latent(posterior, rng, S)
    obs = np_.observation_logvar()
    ll = 0.0
    for s in range(S):
        ll = ll + gaussian_loglik(Yt, decode(np_, z[s], Xt), obs)
    ll = ll * (1.0 / S)
    kl = gaussian_kl(posterior, prior)
    loss = -(ll - kl)
    return {
        "loss": loss,
        "loglik": ll,
        "kl": kl,
        "prior": prior,
        "posterior": posterior,
    }


def np_elbo(np_, context, target, S, rng):
    """``(negative ELBO, diagnostics)``; the latent is sampled from q(z | context + target)."""
    terms = elbo_terms(np_, context, target, S, rng)
    diag = {"loglik": float(terms["loglik"].data), "kl": float(terms["kl"].data)}
    return terms["loss"], diag


def split_context_target(n, fraction, rng):
    """Random disjoint context/target split of ``n`` items (``n`` may be a dataset)."""
    if not isinstance(n, (int, np.integer)):
        n = len(n)
    if not 0.0 < fraction < 1.0:
        raise InputError("context fraction must lie in (0, 1)")
    if n < 2:
        raise InputError("need at least two items to split into context and target")
    n_ctx = min(max(1, int(round(fraction * n))), n - 1)
    perm = rng.permutation(n)
    return ContextTargetSplit(np.sort(perm[:n_ctx]), np.sort(perm[n_ctx:]))


# checkpoints --------------------------------------------------------------------

def _net_arrays(prefix, net):
    out = {}
    for i, (w, b) in enumerate(net.layers):
        out[f"{prefix}.{i}.weight"] = w.data
        out[f"{prefix}.{i}.bias"] = b.data
    return out


def _net_from(arrays, prefix, activation):
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in arrays:
        layers.append((arrays[f"{prefix}.{i}.weight"].copy(), arrays[f"{prefix}.{i}.bias"].copy()))
        i += 1
    return DenseNet(layers, activation)


def save_surrogate(np_, path):
    """Write dims, activation and every parameter array to one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, net in (("encoder", np_.encoder), ("mean_head", np_.mean_head),
                      ("logvar_head", np_.logvar_head), ("decoder", np_.decoder)):
        arrays.update(_net_arrays(name, net))
    arrays["obs_logvar"] = np_.obs_logvar.data
    arrays["dims"] = np.array([np_.d_x, np_.d_y, np_.d_r, np_.d_z])
    arrays["activation"] = np.array(np_.encoder.activation)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_surrogate(path):
    with np.load(path) as f:
        arrays = {k: f[k] for k in f.files}
    act = str(arrays["activation"])
    d_x, d_y, _, _ = (int(v) for v in arrays["dims"])
    return NPSurrogate(
        _net_from(arrays, "encoder", act),
        _net_from(arrays, "mean_head", "identity"),
        _net_from(arrays, "logvar_head", "identity"),
        _net_from(arrays, "decoder", act),
        ad.parameter(arrays["obs_logvar"].copy()),
        d_x,
        d_y,
    )

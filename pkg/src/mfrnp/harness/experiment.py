"""End-to-end experiment driver: data, normalization, training, evaluation."""

from __future__ import annotations

import dataclasses
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mfrnp import multifidelity as mf
from mfrnp import pde
from mfrnp.errors import InputError
from mfrnp.harness.metrics import METRICS, nrmse
from mfrnp.harness.report import write_run
from mfrnp.normalization import fit_norm
from mfrnp.rng import substream

log = logging.getLogger(__name__)


@dataclass
class ExperimentData:
    train: list
    test: pde.FidelityDataset

    @property
    def top(self):
        return self.train[-1]


@dataclass
class RunReport:
    config: dict
    config_hash: str
    metrics: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict)
    status: str = "ok"
    stage: str | None = None
    error: str | None = None
    diagnostics: dict = field(default_factory=dict)
    error_fields: dict = field(default_factory=dict, repr=False)
    model: object = field(default=None, repr=False)
    baseline_model: object = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for key in ("error_fields", "model", "baseline_model"):
            d.pop(key)
        return json_safe(d)


def json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def fidelity_specs(config):
    return [pde.FidelitySpec(k + 1, (r, r)) for k, r in enumerate(config.resolutions)]


def scopes_for(config):
    """(lower-fidelity scope, top-level train scope, test scope)."""
    full = pde.builtin_scopes(config.task, "full")
    if config.regime == "full":
        return full, full, full
    return full, pde.builtin_scopes(config.task, "ood_train"), pde.builtin_scopes(config.task, "ood_test")


def check_ood(task, train_scope, X_test):
    """Every test input must fall outside the training interval in some split dimension."""
    dims = pde.split_dimensions(task)
    lo, hi = train_scope.low[dims], train_scope.high[dims]
    Xs = np.asarray(X_test)[:, dims]
    # the shared endpoint of the two scopes counts as outside
    outside = (Xs < lo) | (Xs > hi) | np.isclose(Xs, lo) | np.isclose(Xs, hi)
    if not np.all(np.any(outside, axis=1)):
        raise InputError("OOD test set overlaps the training scope")


def generate_data(config):
    specs = fidelity_specs(config)
    lower_scope, top_scope, test_scope = scopes_for(config)
    train = []
    for k, spec in enumerate(specs):
        scope = top_scope if k == config.K - 1 else lower_scope
        rng = substream(config.seed, f"data/fidelity{k + 1}")
        ds = pde.sample_dataset(config.task, spec, config.n_train[k], scope, rng)
        ds.seed = config.seed
        train.append(ds)
    test = pde.sample_dataset(config.task, specs[-1], config.n_test, test_scope, substream(config.seed, "data/test"))
    test.seed = config.seed
    if config.regime == "ood":
        check_ood(config.task, top_scope, test.X)
    return ExperimentData(train, test)


def save_data(data, directory):
    d = Path(directory)
    for k, ds in enumerate(data.train):
        pde.save_dataset(ds, d / f"fidelity_{k + 1}")
    pde.save_dataset(data.test, d / "test")
    return d


def load_data(directory, K):
    d = Path(directory)
    train = [pde.load_dataset(d / f"fidelity_{k + 1}") for k in range(K)]
    return ExperimentData(train, pde.load_dataset(d / "test"))


def _train_config(config):
    return dataclasses.replace(config.train, seed=config.seed)


def train_mfrnp(config, data, K=None):
    """Fit normalization and train an MFModel on the data's training sets.

    With ``K=1`` only the top-level data is used (the SF-NP baseline).
    """
    sets = data.train if K is None else data.train[-K:]
    stats = [fit_norm(ds.X, ds.Y) for ds in sets]
    normalized = [(s.apply_x(ds.X), s.apply_y(ds.Y)) for s, ds in zip(stats, sets)]
    specs = [ds.spec for ds in sets]
    weights = config.weights if len(sets) > 1 else None
    name = "init" if len(sets) > 1 else "init/sfnp"
    model = mf.MFModel.create(
        specs, sets[0].X.shape[1], substream(config.seed, name),
        hidden=config.hidden, depth=config.depth, weights=weights, scalings=stats,
    )
    mf.train(model, normalized, _train_config(config))
    return model


def predict_physical(model, X, config, S=None):
    """De-normalized predictions ``(mean, normalized_mean)`` at raw top-level inputs."""
    top = model.scalings[-1]
    S = config.eval_samples if S is None else S
    mean, _ = mf.predict(model, top.apply_x(X), substream(config.seed, "predict"), S=S)
    return top.invert_y(mean), mean


def evaluate(model, data, config):
    pred, pred_norm = predict_physical(model, data.test.X, config)
    truth = data.test.Y
    metrics = {name: METRICS[name](pred, truth) for name in config.metrics}
    top = model.scalings[-1]
    diagnostics = {"nrmse_normalized_space": nrmse(pred_norm, top.apply_y(truth))}
    return metrics, diagnostics, np.abs(pred - truth)


def history_summary(history):
    vals = [h["val_loss"] for h in history if h.get("val_loss") is not None]
    losses = [h["loss"] for h in history if "loss" in h]
    return {
        "epochs": len(losses),
        "best_val_loss": min(vals) if vals else None,
        "initial_val_loss": vals[0] if vals else None,
        "final_loss": losses[-1] if losses else None,
    }


def run_experiment(config, data=None):
    """Run one seed: generate (or reuse) data, train MFRNP and SF-NP, evaluate.

    Never raises for stage failures; the returned report carries
    ``status="failed"`` with the stage name and traceback instead.
    """
    t0 = time.perf_counter()
    report = RunReport(config.to_dict(), config.config_hash())
    stage = "data"
    try:
        if data is None:
            data = generate_data(config)
        stage = "train"
        model = train_mfrnp(config, data)
        stage = "evaluate"
        metrics, diag, err = evaluate(model, data, config)
        report.metrics["mfrnp"] = metrics
        report.diagnostics["mfrnp"] = diag
        report.history["mfrnp"] = history_summary(model.history)
        report.error_fields["mfrnp"] = err
        report.model = model
        if config.baseline:
            stage = "baseline"
            base = train_mfrnp(config, data, K=1)
            metrics, diag, err = evaluate(base, data, config)
            report.metrics["sfnp"] = metrics
            report.diagnostics["sfnp"] = diag
            report.history["sfnp"] = history_summary(base.history)
            report.error_fields["sfnp"] = err
            report.baseline_model = base
        if config.out_dir:
            stage = "write"
            write_run(report, data, config)
    except Exception as exc:  # reported, not raised
        report.status = "failed"
        report.stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        report.diagnostics["traceback"] = traceback.format_exc()
        log.error("run failed in stage %s: %s", stage, exc)
    report.wall_clock = time.perf_counter() - t0
    return report


def run_seeds(config, seeds=None):
    """Run the experiment once per seed and summarize each metric as mean and sample variance."""
    seeds = seeds or config.seeds or [config.seed]
    reports = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=int(seed))
        if config.out_dir:
            cfg.out_dir = str(Path(config.out_dir) / f"seed_{seed}")
        reports.append(run_experiment(cfg))
    return reports, summarize(reports)


def summarize(reports):
    out = {}
    ok = [r for r in reports if r.ok]
    if not ok:
        return out
    for model_name in ok[0].metrics:
        for metric in ok[0].metrics[model_name]:
            vals = np.array([r.metrics[model_name][metric] for r in ok])
            out.setdefault(model_name, {})[metric] = {
                "mean": float(vals.mean()),
                "variance": float(vals.var(ddof=1)) if len(vals) > 1 else 0.0,
                "values": vals.tolist(),
            }
    return out

"""Frozen-body transfer learning benchmark.

A pretrained predictor's body is copied and frozen, a fresh linear head is
attached, and the result is compared against an identically shaped, randomly
initialised and fully trainable twin on a small training sample, repeated over
several paired runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import nncore
from .errors import ArchitectureError, ConfigError, NumericError, SchemaError
from .models import TrainHyper, arch_of, run_jobs, train
from .nncore import ModelBundle, dense

TASKS = ("liquidity", "default_rate")


@dataclass
class TransferConfig:
    task: str = "liquidity"
    train_size: int = 100
    runs: int = 20
    validation_size: int = 1000
    master_seed: int = 2021
    epochs: int = 300
    lr: float = 1e-2
    batch_size: int = 32
    patience: int = 30
    # share of each training sample held back to drive early stopping
    monitor_fraction: float = 0.2

    def validate(self) -> "TransferConfig":
        self.task = self.task.replace("-", "_")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.train_size < 2:
            raise ConfigError(f"train_size must be >= 2, got {self.train_size}")
        if self.runs < 2:
            raise ConfigError(f"runs must be >= 2, got {self.runs}")
        if self.validation_size < 1:
            raise ConfigError(f"validation_size must be >= 1, got {self.validation_size}")
        if self.epochs < 1 or not self.lr > 0 or self.patience < 0:
            raise ConfigError("epochs must be >= 1, lr > 0 and patience >= 0")
        if not 0.0 <= self.monitor_fraction < 1.0:
            raise ConfigError("monitor_fraction must lie in [0, 1)")
        return self

    @property
    def hyper(self) -> TrainHyper:
        return TrainHyper(self.epochs, self.lr, self.batch_size, self.patience)


def body_layer_count(pretrained: ModelBundle) -> int:
    kind = arch_of(pretrained)
    if kind == "rnn_predictor":
        return 1
    if kind == "ff_predictor":
        return 2
    raise ArchitectureError(f"no frozen body/bottleneck defined for a {kind} model")


def freeze_and_head(pretrained: ModelBundle, out_dim: int = 1, seed: int = 0) -> ModelBundle:
    """Copy the pretrained body (frozen) and attach a fresh trainable linear head."""
    k = body_layer_count(pretrained)
    body = pretrained.layers[:k]
    hidden = body[-1].out_dim
    layers = body + (dense(hidden, out_dim),)
    n_body = nncore.param_count(body)
    fresh = nncore.init_bundle(layers, seed)
    weights = fresh.weights
    weights[:n_body] = pretrained.weights[:n_body]
    mask = np.ones(weights.size, dtype=bool)
    mask[:n_body] = False
    meta = {
        "arch": arch_of(pretrained),
        "hidden": hidden,
        "input_dim": layers[0].in_dim,
        "transfer": True,
        "body_weights": n_body,
    }
    return ModelBundle(layers, weights, mask, int(seed), meta)


def random_twin(model: ModelBundle, seed: int) -> ModelBundle:
    """Same architecture, freshly initialised, every weight trainable."""
    twin = nncore.init_bundle(model.layers, seed)
    twin.train_meta = {k: v for k, v in model.train_meta.items() if k not in ("transfer", "body_weights")}
    return twin


def confidence_interval(values, level: float = 0.95):
    """Mean and Student-t half-width of the ``level`` confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ConfigError("a confidence interval needs at least 2 values")
    if not np.all(np.isfinite(v)):
        raise NumericError("confidence interval over non-finite values")
    k = v.size
    # identical values: skip the rounding noise of the mean and report exactly zero
    sd = 0.0 if np.ptp(v) == 0 else v.std(ddof=1)
    half = float(stats.t.ppf(0.5 + level / 2.0, k - 1) * sd / np.sqrt(k))
    return float(v.mean()), half


@dataclass
class ArmReport:
    total_weights: int
    trainable_weights: int
    mse_mean: float
    ci95_halfwidth: float
    losses: list = field(default_factory=list)


@dataclass
class BenchmarkReport:
    task: str
    body: str
    config: dict
    arms: dict  # "transfer" / "random" -> ArmReport
    per_run: list
    frozen_body_intact: bool

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "body": self.body,
            "config": self.config,
            "arms": {name: asdict(arm) for name, arm in self.arms.items()},
            "per_run": self.per_run,
            "frozen_body_intact": self.frozen_body_intact,
        }


def benchmark_inputs(pretrained: ModelBundle, cube) -> np.ndarray:
    """Recurrent bodies read the whole sequence, feed-forward bodies the window-average row."""
    return cube.spend if pretrained.is_recurrent else cube.overall_spend()


def _run_once(args):
    run, seed, pretrained, x, y, val_idx, sample, cfg = args
    n_monitor = int(round(len(sample) * cfg.monitor_fraction))
    fit, monitor = sample[n_monitor:], sample[:n_monitor]
    mu, sd = y[fit].mean(), y[fit].std()
    sd = sd if sd > 0 else 1.0
    scaled = (y - mu) / sd

    transfer_model = freeze_and_head(pretrained, 1, seed)
    random_model = random_twin(transfer_model, seed + 1)
    result = {"run": run, "seed": seed}
    for name, model in (("transfer", transfer_model), ("random", random_model)):
        kwargs = {}
        if n_monitor:
            kwargs = {"x_val": x[monitor], "y_val": scaled[monitor]}
        try:
            train(model, x[fit], scaled[fit], cfg.hyper, seed=seed, **kwargs)
        except NumericError as exc:
            raise NumericError(f"benchmark run {run} ({name} arm) diverged: {exc}") from exc
        pred = nncore.forward(model, x[val_idx]) * sd + mu
        result[f"{name}_mse"] = nncore.mse(pred, y[val_idx])
        result[f"{name}_model"] = model
    return result


def run_benchmark(pretrained: ModelBundle, cube, config: Optional[TransferConfig] = None,
                  workers: int = 1) -> BenchmarkReport:
    """Paired transfer-vs-random comparison over ``config.runs`` training samples."""
    cfg = (config or TransferConfig()).validate()
    body_layer_count(pretrained)
    y = cube.target(cfg.task)[:, None]
    x = benchmark_inputs(pretrained, cube)
    n = len(y)
    if n < cfg.validation_size + cfg.train_size:
        raise SchemaError(
            f"{n} customers cannot cover validation_size={cfg.validation_size} "
            f"plus train_size={cfg.train_size}"
        )
    root = np.random.SeedSequence(cfg.master_seed)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    perm = split_rng.permutation(n)
    val_idx = np.sort(perm[: cfg.validation_size])
    pool = perm[cfg.validation_size :]
    run_seeds = root.generate_state(cfg.runs, dtype=np.uint32)
    jobs = []
    for run, s in enumerate(run_seeds):
        sample = np.random.default_rng(int(s)).choice(pool, cfg.train_size, replace=False)
        jobs.append((run, int(s), pretrained, x, y, val_idx, sample, cfg))
    results = sorted(run_jobs(_run_once, jobs, workers), key=lambda r: r["run"])

    n_body = nncore.param_count(pretrained.layers[: body_layer_count(pretrained)])
    intact = all(
        np.array_equal(r["transfer_model"].weights[:n_body], pretrained.weights[:n_body])
        for r in results
    )
    arms = {}
    for name in ("transfer", "random"):
        losses = [r[f"{name}_mse"] for r in results]
        mean, half = confidence_interval(losses)
        model = results[0][f"{name}_model"]
        arms[name] = ArmReport(model.total_weights, model.trainable_weights, mean, half, losses)
    per_run = [
        {"seed": r["seed"], "transfer_mse": r["transfer_mse"], "random_mse": r["random_mse"]}
        for r in results
    ]
    return BenchmarkReport(cfg.task, arch_of(pretrained), asdict(cfg), arms, per_run, intact)

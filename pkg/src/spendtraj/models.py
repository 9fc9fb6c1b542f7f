"""The four feature-extraction architectures, their training loop, the hidden-size
elbow sweep and hidden-state extraction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nncore
from .errors import ArchitectureError, ConfigError, DimensionError, NumericError
from .nncore import ModelBundle, dense, lstm

ARCH_KINDS = ("ff_autoencoder", "ff_predictor", "rnn_autoencoder", "rnn_predictor")
ARCH_ALIASES = {
    "ff-ae": "ff_autoencoder",
    "ff-pred": "ff_predictor",
    "rnn-ae": "rnn_autoencoder",
    "rnn-pred": "rnn_predictor",
}
TARGET_MODES = ("trait_vector", "dominant_class")
FF_TRUNK = 16
DEFAULT_HIDDEN = {"ff_autoencoder": 5, "ff_predictor": 5, "rnn_autoencoder": 3, "rnn_predictor": 3}
ELBOW_THRESHOLD = 0.05


def resolve_kind(kind: str) -> str:
    kind = ARCH_ALIASES.get(kind, kind)
    if kind not in ARCH_KINDS:
        raise ArchitectureError(f"unknown architecture {kind!r}")
    return kind


def architecture(kind: str, m: int, h: int, out: int = 5) -> list:
    kind = resolve_kind(kind)
    if m < 2 or h < 1 or out < 1:
        raise ArchitectureError(f"invalid dims m={m}, h={h}, out={out}")
    if kind == "ff_autoencoder":
        return [dense(m, FF_TRUNK, "tanh"), dense(FF_TRUNK, h, "tanh"),
                dense(h, FF_TRUNK, "tanh"), dense(FF_TRUNK, m)]
    if kind == "ff_predictor":
        return [dense(m, FF_TRUNK, "tanh"), dense(FF_TRUNK, h, "tanh"), dense(h, out)]
    if kind == "rnn_autoencoder":
        # encoder final state is repeated for every step of the decoder
        return [lstm(m, h), lstm(h, h, return_sequences=True), dense(h, m)]
    return [lstm(m, h), dense(h, out)]


def build(kind: str, m: int, h: Optional[int] = None, target_mode: str = "trait_vector",
          seed: int = 0) -> ModelBundle:
    kind = resolve_kind(kind)
    if target_mode not in TARGET_MODES:
        raise ConfigError(f"unknown target_mode {target_mode!r}")
    h = DEFAULT_HIDDEN[kind] if h is None else int(h)
    bundle = nncore.init_bundle(architecture(kind, m, h), seed)
    bundle.train_meta = {"arch": kind, "hidden": h, "input_dim": m}
    if kind.endswith("predictor"):
        bundle.train_meta["target_mode"] = target_mode
    return bundle


def arch_of(bundle: ModelBundle) -> str:
    kind = bundle.train_meta.get("arch")
    if kind is None:
        raise ArchitectureError("model carries no architecture tag")
    return kind


def training_data(kind: str, cube, scores=None, target_mode: str = "trait_vector"):
    """Inputs and targets for one architecture.

    Feed-forward models see one row per customer-year, recurrent models one
    sequence per customer. Predictors learn annual traits (feed-forward) or
    overall traits (recurrent); autoencoders reconstruct their input.
    """
    kind = resolve_kind(kind)
    n, T, m = cube.shape
    x = cube.spend.reshape(n * T, m) if kind.startswith("ff") else cube.spend
    if kind.endswith("autoencoder"):
        return x, x
    if scores is None:
        raise ConfigError("predictors need personality scores as targets")
    y = scores.annual.reshape(n * T, 5) if kind == "ff_predictor" else scores.overall
    if target_mode == "dominant_class":
        dom = np.argsort(-np.abs(y), axis=-1, kind="stable")[:, 0]
        y = np.eye(5)[dom]
    return x, y


@dataclass
class TrainHyper:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainReport:
    epochs: int
    train_loss_curve: list
    val_loss: float
    seed: int
    initial_loss: float
    val_loss_curve: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(bundle: ModelBundle, x, y):
    out = nncore.forward(bundle, x[:1])
    if out.shape[1:] != y.shape[1:] or len(x) != len(y):
        raise DimensionError(
            f"data shapes x{x.shape} y{y.shape} do not fit the model output {out.shape[1:]}"
        )


def train(bundle: ModelBundle, x, y, hyper: Optional[TrainHyper] = None, *, x_val=None,
          y_val=None, seed: int = 0) -> TrainReport:
    """Mini-batch Adam on MSE with early stopping; updates ``bundle`` in place.

    Early stopping watches the validation loss when validation data are given,
    otherwise the training loss, and the best weights seen are restored.
    """
    hyper = hyper or TrainHyper()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_shapes(bundle, x, y)
    has_val = x_val is not None
    if has_val:
        x_val = np.asarray(x_val, dtype=np.float64)
        y_val = np.asarray(y_val, dtype=np.float64)
        _check_shapes(bundle, x_val, y_val)

    def monitored():
        tl = nncore.loss(bundle, x, y)
        return tl, (nncore.loss(bundle, x_val, y_val) if has_val else tl)

    with np.errstate(over="ignore", invalid="ignore"):
        initial_loss, best = monitored()
    best_weights = bundle.weights.copy()
    rng = np.random.default_rng(seed)
    state = nncore.AdamState.zeros(bundle.weights.size)
    curve, val_curve = [], []
    best_epoch, stale = 0, 0
    n = len(x)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        # overflow is caught below as a non-finite loss or gradient
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                for start in range(0, n, hyper.batch_size):
                    idx = order[start : start + hyper.batch_size]
                    _, grad = nncore.loss_and_gradient(bundle, x[idx], y[idx])
                    bundle.weights = nncore.adam_step(
                        bundle.weights, grad, state, hyper.lr, hyper.beta1, hyper.beta2,
                        hyper.eps, mask=bundle.trainable_mask,
                    )
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            tl, vl = monitored()
        if not (np.isfinite(tl) and np.isfinite(vl)):
            raise NumericError(f"loss became non-finite at epoch {epoch}")
        curve.append(tl)
        val_curve.append(vl)
        if vl < best:
            best, best_weights, best_epoch, stale = vl, bundle.weights.copy(), epoch, 0
        else:
            stale += 1
            if hyper.patience and stale >= hyper.patience:
                break
    bundle.weights = best_weights
    report = TrainReport(len(curve), curve, float(best), int(seed), float(initial_loss),
                         val_curve, best_epoch)
    bundle.train_meta["epochs_run"] = report.epochs
    bundle.train_meta["final_train_loss"] = curve[-1] if curve else initial_loss
    bundle.train_meta["val_loss"] = report.val_loss
    return report


def fit_on_cube(kind: str, cube, scores=None, *, h: Optional[int] = None,
                hyper: Optional[TrainHyper] = None, seed: int = 0, train_fraction: float = 0.8,
                target_mode: str = "trait_vector"):
    """Build and train one architecture on a customer-level train/validation split.

    The validation customers drive early stopping. Returns ``(bundle, report)``.
    """
    from .dataset import split_indices

    kind = resolve_kind(kind)
    n, T, m = cube.shape
    x, y = training_data(kind, cube, scores, target_mode)
    tr, va = split_indices(n, train_fraction, seed)
    if kind.startswith("ff"):
        # one row per customer-year: expand customer indices to their T rows
        tr = (tr[:, None] * T + np.arange(T)).ravel()
        va = (va[:, None] * T + np.arange(T)).ravel()
    bundle = build(kind, m, h, target_mode, seed=seed)
    report = train(bundle, x[tr], y[tr], hyper, x_val=x[va], y_val=y[va], seed=seed)
    return bundle, report


# ---------------------------------------------------------------------------
# elbow sweep


def choose_elbow(h_candidates: Sequence[int], mean_losses: Sequence[float],
                 threshold: float = ELBOW_THRESHOLD) -> int:
    """Smallest h whose relative loss improvement to the next candidate is below threshold."""
    for k in range(len(h_candidates) - 1):
        cur, nxt = mean_losses[k], mean_losses[k + 1]
        improvement = (cur - nxt) / cur if cur > 0 else 0.0
        if improvement < threshold:
            return int(h_candidates[k])
    return int(h_candidates[-1])


@dataclass
class ElbowResult:
    chosen_h: int
    h_candidates: list
    losses: dict  # h -> list of validation losses, one per run
    mean_losses: list
    threshold: float = ELBOW_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "chosen_h": self.chosen_h,
            "h_candidates": self.h_candidates,
            "threshold": self.threshold,
            "mean_losses": self.mean_losses,
            "losses": {str(h): v for h, v in self.losses.items()},
        }


def _sweep_job(args):
    h, run_seed, m, x, y, x_val, y_val, hyper, target_mode = args
    bundle = build("rnn_predictor", m, h, target_mode, seed=run_seed)
    try:
        report = train(bundle, x, y, hyper, x_val=x_val, y_val=y_val, seed=run_seed)
    except NumericError as exc:
        raise NumericError(f"elbow sweep failed at h={h}, seed={run_seed}: {exc}") from exc
    return h, run_seed, report.val_loss


def elbow_sweep(x, y, h_candidates, runs_per_h: int = 5, *, x_val=None, y_val=None,
                hyper: Optional[TrainHyper] = None, seed: int = 0,
                target_mode: str = "trait_vector", threshold: float = ELBOW_THRESHOLD,
                workers: int = 1) -> ElbowResult:
    """Train rnn predictors over hidden sizes, ``runs_per_h`` seeds each, and pick the elbow."""
    h_candidates = [int(h) for h in h_candidates]
    if len(h_candidates) < 2 or h_candidates != sorted(set(h_candidates)):
        raise ConfigError("h_candidates must be >= 2 distinct sizes in ascending order")
    if runs_per_h < 1:
        raise ConfigError("runs_per_h must be >= 1")
    m = np.asarray(x).shape[-1]
    seeds = np.random.SeedSequence(seed).generate_state(runs_per_h, dtype=np.uint32)
    jobs = [(h, int(s), m, x, y, x_val, y_val, hyper, target_mode)
            for h in h_candidates for s in seeds]
    results = run_jobs(_sweep_job, jobs, workers)
    losses = {h: [] for h in h_candidates}
    for h, _, loss in results:
        losses[h].append(loss)
    means = [float(np.mean(losses[h])) for h in h_candidates]
    return ElbowResult(choose_elbow(h_candidates, means, threshold), h_candidates, losses,
                       means, threshold)


def run_jobs(fn, jobs, workers: int = 1) -> list:
    """Map ``fn`` over ``jobs`` in order, optionally across processes."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers, initializer=single_blas_thread) as pool:
        return list(pool.map(fn, jobs))


_BLAS_LIMIT = None


def single_blas_thread():
    """Pin BLAS to one thread so results do not depend on the worker count."""
    global _BLAS_LIMIT
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=1)


# ---------------------------------------------------------------------------
# state extraction


def extract_states(bundle: ModelBundle, sequences) -> np.ndarray:
    """Hidden vectors of the first (encoder) LSTM after every step.

    ``sequences`` is ``(T, m)`` or ``(n, T, m)``; the result is ``(T, h)`` or
    ``(n, T, h)``.
    """
    if not bundle.lstm_indices():
        raise ArchitectureError("model has no lstm layer to extract states from")
    seq = np.asarray(sequences, dtype=np.float64)
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    if seq.ndim != 3 or seq.shape[-1] != bundle.layers[0].in_dim:
        raise DimensionError(f"sequence shape {seq.shape} does not fit input width {bundle.layers[0].in_dim}")
    states = nncore.hidden_states(bundle, seq)[0]
    return states[0] if single else states

"""Synthetic customer populations whose spending is driven by latent Big-Five traits.

Each customer draws a personality ``p`` (standard normal per trait, truncated to
[-3, 3]); year ``t`` spends ``softmax(b + alpha * C.T @ p + eps_t + spike_t)``
across categories, where ``C`` is the coefficient table and ``b`` fixed base
logits. Income is 1.0 so shares are already income-normalised.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .dataset import SpendingCube
from .errors import ConfigError
from .personality import CoefficientTable, default_table

# Fixed target weights, trait order O, C, E, A, N.
LIQUIDITY_WEIGHTS = np.array([0.2, 0.7, -0.3, 0.1, -0.5])
DEFAULT_RATE_WEIGHTS = np.array([0.1, -0.8, 0.3, -0.2, 0.6])
TARGET_NOISE_SD = 0.1
DEFAULT_RATE_SCALE = 10.0

_BASE_SHARES_12 = np.array(
    [0.20, 0.10, 0.07, 0.04, 0.06, 0.08, 0.05, 0.08, 0.15, 0.08, 0.04, 0.05]
)


@dataclass(frozen=True)
class GenConfig:
    n_customers: int = 2000
    n_years: int = 6
    n_categories: int = 12
    personality_strength: float = 1.0
    noise_sd: float = 0.05
    event_prob: float = 0.1
    event_magnitude: float = 3.0
    master_seed: int = 2021
    # number of independent latent directions behind the five traits (5 = all free)
    latent_rank: int = 5

    def validate(self) -> "GenConfig":
        checks = [
            ("n_customers", self.n_customers >= 1, ">= 1"),
            ("n_years", self.n_years >= 2, ">= 2"),
            ("n_categories", self.n_categories >= 2, ">= 2"),
            ("personality_strength", self.personality_strength >= 0, ">= 0"),
            ("noise_sd", self.noise_sd >= 0, ">= 0"),
            ("event_prob", 0 <= self.event_prob <= 1, "in [0, 1]"),
            ("event_magnitude", self.event_magnitude >= 0, ">= 0"),
            ("latent_rank", 1 <= self.latent_rank <= 5, "in 1..5"),
            ("master_seed", 0 <= self.master_seed < 2**64, "a 64-bit unsigned integer"),
        ]
        for name, ok, bound in checks:
            if not ok:
                raise ConfigError(f"{name} must be {bound}, got {getattr(self, name)!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def base_logits(m: int) -> np.ndarray:
    if m == 12:
        shares = _BASE_SHARES_12
    else:
        rng = np.random.default_rng(np.random.SeedSequence(4242, spawn_key=(m,)))
        shares = rng.dirichlet(np.full(m, 5.0))
    logits = np.log(shares)
    return logits - logits.mean()


def latent_basis(rank: int) -> np.ndarray:
    """Fixed 5 x rank matrix with orthonormal columns."""
    rng = np.random.default_rng(np.random.SeedSequence(777, spawn_key=(rank,)))
    q, _ = np.linalg.qr(rng.normal(size=(5, rank)))
    return q


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def customer_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def _truncated_normal(rng, size, bound=3.0):
    x = rng.standard_normal(size)
    while True:
        bad = np.abs(x) > bound
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum()))


def synth_targets(personality, rng: np.random.Generator, noise_sd: float = TARGET_NOISE_SD):
    """``(liquidity, default_rate)`` for one customer.

    liquidity = w_l . p + N(0, 0.1); default_rate = 10 * sigmoid(w_d . p + N(0, 0.1)).
    """
    p = np.asarray(personality, dtype=np.float64)
    noise = rng.standard_normal(2) * noise_sd
    liquidity = float(LIQUIDITY_WEIGHTS @ p + noise[0])
    default_rate = float(DEFAULT_RATE_SCALE / (1.0 + np.exp(-(DEFAULT_RATE_WEIGHTS @ p + noise[1]))))
    return liquidity, default_rate


def _generate_customer(config: GenConfig, index: int, coeff_t: np.ndarray, b: np.ndarray, basis):
    rng = customer_rng(config.master_seed, index)
    T, m = config.n_years, config.n_categories
    if basis is None:
        p = _truncated_normal(rng, 5)
    else:
        p = np.clip(basis @ _truncated_normal(rng, basis.shape[1]), -3.0, 3.0)
    # the draw layout does not depend on sigma / rho so those knobs leave p untouched
    eps = rng.standard_normal((T, m)) * config.noise_sd
    event_u = rng.random(T)
    event_cat = rng.integers(0, m, size=T)
    logits = b + config.personality_strength * (coeff_t @ p) + eps
    hit = event_u < config.event_prob
    logits[np.flatnonzero(hit), event_cat[hit]] += config.event_magnitude
    shares = softmax(logits)
    return shares, p, synth_targets(p, rng)


def generate_population(config: GenConfig, table: Optional[CoefficientTable] = None) -> SpendingCube:
    """Build a :class:`SpendingCube` with targets and true personalities attached."""
    config.validate()
    table = table if table is not None else default_table(config.n_categories)
    if table.m != config.n_categories:
        raise ConfigError(f"coefficient table has {table.m} categories, config asks for {config.n_categories}")
    coeff_t = table.coefficients.T
    b = base_logits(config.n_categories)
    basis = None if config.latent_rank == 5 else latent_basis(config.latent_rank)
    n = config.n_customers
    spend = np.empty((n, config.n_years, config.n_categories))
    truth = np.empty((n, 5))
    targets = np.empty((n, 2))
    for k in range(n):
        spend[k], truth[k], targets[k] = _generate_customer(config, k, coeff_t, b, basis)
    ids = tuple(f"c{k:06d}" for k in range(n))
    return SpendingCube(ids, spend, np.ones((n, config.n_years)), targets, truth)


def latent_factor_task(n_customers: int = 2000, rank: int = 3, label_noise: float = 0.4,
                       seed: int = 2021, **overrides):
    """Sequences driven by ``rank`` latent directions, with noisy trait labels.

    The labels are the standardised true traits (a linear image of the latent
    factors) plus independent Gaussian noise, so a predictor gains nothing
    from more than ``rank`` state dimensions beyond the noise floor.
    Returns ``(cube, labels)``.
    """
    config = GenConfig(n_customers=n_customers, latent_rank=rank, master_seed=seed, **overrides)
    cube = generate_population(config)
    p = cube.truth_personality
    labels = (p - p.mean(axis=0)) / p.std(axis=0)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**32 - 1,)))
    return cube, labels + rng.normal(0.0, label_noise, size=labels.shape)

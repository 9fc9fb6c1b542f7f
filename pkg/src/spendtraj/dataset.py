"""Spending cubes: annual aggregation, reshaping, splitting and JSONL persistence."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, ParseError, SchemaError

TARGET_NAMES = ("liquidity", "default_rate")


@dataclass(frozen=True, eq=False)
class SpendingCube:
    """Income-normalised annual category spend, ``spend[customer, year, category]``.

    ``targets`` columns follow :data:`TARGET_NAMES`.
    """

    customer_ids: tuple
    spend: np.ndarray
    income: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    truth_personality: Optional[np.ndarray] = None

    def __post_init__(self):
        spend = np.asarray(self.spend, dtype=np.float64)
        if spend.ndim != 3:
            raise SchemaError(f"spend must be n x T x m, got shape {spend.shape}")
        n, T, m = spend.shape
        if T < 2:
            raise SchemaError(f"need at least 2 years, got {T}")
        if len(self.customer_ids) != n:
            raise SchemaError(f"{len(self.customer_ids)} ids for {n} customers")
        object.__setattr__(self, "customer_ids", tuple(str(c) for c in self.customer_ids))
        object.__setattr__(self, "spend", spend)
        income = np.ones((n, T)) if self.income is None else np.asarray(self.income, dtype=np.float64)
        if income.shape != (n, T):
            raise SchemaError(f"income shape {income.shape} != {(n, T)}")
        object.__setattr__(self, "income", income)
        for name, width in (("targets", 2), ("truth_personality", 5)):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape != (n, width):
                    raise SchemaError(f"{name} shape {arr.shape} != {(n, width)}")
                object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple:
        return self.spend.shape

    @property
    def n(self) -> int:
        return self.spend.shape[0]

    def subset(self, index) -> "SpendingCube":
        index = np.asarray(index, dtype=int)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return SpendingCube(
            tuple(self.customer_ids[i] for i in index),
            self.spend[index],
            self.income[index],
            pick(self.targets),
            pick(self.truth_personality),
        )

    def overall_spend(self) -> np.ndarray:
        """Spend over the whole window divided by income over the whole window, ``(n, m)``."""
        w = self.income[:, :, None]
        return (self.spend * w).sum(axis=1) / self.income.sum(axis=1)[:, None]

    def target(self, name: str) -> np.ndarray:
        if self.targets is None:
            raise SchemaError("dataset carries no targets")
        key = name.replace("-", "_")
        if key not in TARGET_NAMES:
            raise ConfigError(f"unknown target {name!r}; expected one of {TARGET_NAMES}")
        return self.targets[:, TARGET_NAMES.index(key)]

    def equals(self, other: "SpendingCube") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.customer_ids == other.customer_ids
            and same(self.spend, other.spend)
            and same(self.income, other.income)
            and same(self.targets, other.targets)
            and same(self.truth_personality, other.truth_personality)
        )


def aggregate_annual(
    transactions: Iterable,
    incomes: Mapping,
    categories,
    years=None,
) -> SpendingCube:
    """Sum ``(customer, year, category, amount)`` transactions per customer, year
    and category, dividing by that customer's income for the year.

    Customers and years are taken from ``incomes`` keys (plus any transaction
    customers); a customer with no data for a year gets a zero row.
    """
    categories = list(categories)
    col = {c: j for j, c in enumerate(categories)}
    for (cust, year), amount in incomes.items():
        if not amount > 0:
            raise SchemaError(f"non-positive income {amount!r} for customer {cust!r}, year {year!r}")
    sums = defaultdict(float)
    customers = {c for c, _ in incomes}
    for cust, year, cat, amount in transactions:
        if cat not in col:
            raise SchemaError(f"unknown category {cat!r}")
        if (cust, year) not in incomes:
            raise SchemaError(f"no positive income for customer {cust!r}, year {year!r}")
        sums[(cust, year, col[cat])] += amount
        customers.add(cust)
    if years is None:
        years = sorted({y for _, y in incomes})
    years = list(years)
    row = {y: t for t, y in enumerate(years)}
    ids = sorted(customers, key=str)
    index = {c: k for k, c in enumerate(ids)}
    spend = np.zeros((len(ids), len(years), len(categories)))
    income = np.ones((len(ids), len(years)))
    for (cust, year), amount in incomes.items():
        if year in row:
            income[index[cust], row[year]] = amount
    for (cust, year, j), total in sums.items():
        if year in row:
            spend[index[cust], row[year], j] = total / incomes[(cust, year)]
    return SpendingCube(tuple(str(c) for c in ids), spend, income)


@dataclass(frozen=True, eq=False)
class FlatTable:
    """Customer-major, year-minor flattening of a cube to ``(n*T, m)`` rows."""

    rows: np.ndarray
    n_years: int
    row_index: list = field(default_factory=list)

    def locate(self, k: int) -> tuple:
        return divmod(int(k), self.n_years)


def flatten(cube: SpendingCube) -> FlatTable:
    n, T, m = cube.shape
    index = [(c, t) for c in range(n) for t in range(T)]
    return FlatTable(cube.spend.reshape(n * T, m).copy(), T, index)


def unflatten(table: FlatTable, template: SpendingCube) -> SpendingCube:
    """Inverse of :func:`flatten`; ids, income and targets come from ``template``."""
    n, T, m = template.shape
    if table.rows.shape != (n * T, m):
        raise SchemaError(f"table shape {table.rows.shape} does not unflatten to {(n, T, m)}")
    return SpendingCube(
        template.customer_ids,
        table.rows.reshape(n, T, m).copy(),
        template.income,
        template.targets,
        template.truth_personality,
    )


def split_indices(n: int, train_fraction: float = 0.8, seed: int = 0):
    """Sorted ``(train, validation)`` customer indices of a seeded random split."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(math.floor(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"a {train_fraction} split of {n} customers leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(cube: SpendingCube, train_fraction: float = 0.8, seed: int = 0):
    """Customer-level random split into ``(train, validation)`` cubes."""
    train_idx, val_idx = split_indices(cube.n, train_fraction, seed)
    return cube.subset(train_idx), cube.subset(val_idx)


# ---------------------------------------------------------------------------
# JSONL


def cube_to_jsonl(cube: SpendingCube) -> str:
    lines = []
    for k, cid in enumerate(cube.customer_ids):
        rec = {
            "customer_id": cid,
            "spend": cube.spend[k].tolist(),
            "income": cube.income[k].tolist(),
        }
        if cube.targets is not None:
            rec["targets"] = dict(zip(TARGET_NAMES, cube.targets[k].tolist()))
        if cube.truth_personality is not None:
            rec["truth_personality"] = cube.truth_personality[k].tolist()
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save_jsonl(cube: SpendingCube, path):
    return atomic_write_text(path, cube_to_jsonl(cube))


def load_jsonl(path) -> SpendingCube:
    ids, spend, income, targets, truth = [], [], [], [], []
    shape = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", lineno)
            for key in ("customer_id", "spend"):
                if key not in rec:
                    raise ParseError(f"missing key {key!r}", lineno)
            try:
                s = np.asarray(rec["spend"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"spend is not a numeric T x m array ({exc})", lineno) from exc
            if s.ndim != 2:
                raise ParseError(f"spend must be T x m, got rank {s.ndim}", lineno)
            if shape is None:
                shape = s.shape
            elif s.shape != shape:
                raise ParseError(f"spend shape {s.shape} differs from first line {shape}", lineno)
            inc = rec.get("income")
            inc = np.ones(s.shape[0]) if inc is None else np.asarray(inc, dtype=np.float64)
            if inc.shape != (s.shape[0],):
                raise ParseError(f"income length {inc.size} != T={s.shape[0]}", lineno)
            ids.append(str(rec["customer_id"]))
            spend.append(s)
            income.append(inc)
            tg = rec.get("targets")
            if tg is not None:
                try:
                    tg = [float(tg[name]) for name in TARGET_NAMES]
                except (KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"targets need numeric {', '.join(TARGET_NAMES)} ({exc})", lineno) from exc
            targets.append(tg)
            tp = rec.get("truth_personality")
            if tp is not None and len(tp) != 5:
                raise ParseError("truth_personality must hold 5 numbers", lineno)
            truth.append(tp)
    if not ids:
        raise SchemaError(f"{path}: no customer records")

    def column(values, name):
        present = [v is not None for v in values]
        if not any(present):
            return None
        if not all(present):
            raise SchemaError(f"{name} present for some customers but not all")
        return np.asarray(values, dtype=np.float64)

    return SpendingCube(
        tuple(ids),
        np.stack(spend),
        np.stack(income),
        column(targets, "targets"),
        column(truth, "truth_personality"),
    )

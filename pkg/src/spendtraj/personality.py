"""Big-Five trait scores from spending shares via a trait x category coefficient table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ._io import atomic_write_text
from .errors import DimensionError, NumericError, SchemaError

TRAITS = ("openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism")
TRAIT_LETTERS = ("O", "C", "E", "A", "N")
COEFF_BOUND = 3.0


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    categories: tuple
    coefficients: np.ndarray  # (5, m), rows in TRAITS order

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=np.float64)
        cats = tuple(self.categories)
        if coeffs.shape != (5, len(cats)):
            raise SchemaError(f"coefficients shape {coeffs.shape} != (5, {len(cats)})")
        if len(cats) < 2:
            raise SchemaError("a coefficient table needs at least 2 categories")
        if len(set(cats)) != len(cats):
            dup = next(c for c in cats if cats.count(c) > 1)
            raise SchemaError(f"duplicate category {dup!r}")
        bad = np.argwhere(~(np.abs(coeffs) <= COEFF_BOUND))
        if bad.size:
            i, j = bad[0]
            raise SchemaError(
                f"coefficient {coeffs[i, j]} for ({cats[j]}, {TRAITS[i]}) outside [-3, 3]"
            )
        object.__setattr__(self, "categories", cats)
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def m(self) -> int:
        return len(self.categories)

    def coefficient(self, category: str, trait: str) -> float:
        return float(self.coefficients[TRAITS.index(trait), self.categories.index(category)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("category",) + TRAITS)
        for j, cat in enumerate(self.categories):
            writer.writerow([cat] + [repr(float(v)) for v in self.coefficients[:, j]])
        return buf.getvalue()


def parse_coefficients(text: str, source: str = "<coefficients>") -> CoefficientTable:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    expected = ["category", *TRAITS]
    if header is None or [h.strip().lower() for h in header] != expected:
        raise SchemaError(f"{source}: header must be {','.join(expected)}")
    cats, cols = [], []
    for k, row in enumerate(reader, start=2):
        if len(row) != 6:
            raise SchemaError(f"{source}: row {k} has {len(row)} fields, expected 6")
        try:
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise SchemaError(f"{source}: row {k}: {exc}") from exc
        cats.append(row[0].strip())
        cols.append(values)
    if not cols:
        raise SchemaError(f"{source}: no category rows")
    return CoefficientTable(tuple(cats), np.asarray(cols).T)


def load_coefficients(path) -> CoefficientTable:
    with open(path, encoding="utf-8") as fh:
        return parse_coefficients(fh.read(), str(path))


def save_coefficients(table: CoefficientTable, path):
    return atomic_write_text(path, table.to_csv())


def default_table(m: int = 12) -> CoefficientTable:
    """The shipped synthetic 12-category table, or a seeded synthetic one for other ``m``."""
    if m == 12:
        text = resources.files("spendtraj").joinpath("data/default_coefficients.csv").read_text()
        return parse_coefficients(text, "default_coefficients.csv")
    rng = np.random.default_rng(np.random.SeedSequence(20210, spawn_key=(m,)))
    coeffs = np.round(rng.uniform(-2.5, 2.5, size=(5, m)), 2)
    return CoefficientTable(tuple(f"category_{j:02d}" for j in range(m)), coeffs)


def score(spend_row, table: CoefficientTable) -> np.ndarray:
    """Raw trait vector: coefficient-weighted sum of category shares.

    Also accepts any ``(..., m)`` stack of rows.
    """
    spend_row = np.asarray(spend_row, dtype=np.float64)
    if spend_row.shape[-1] != table.m:
        raise DimensionError(f"spend has {spend_row.shape[-1]} categories, table has {table.m}")
    return spend_row @ table.coefficients.T


def standardize(raw_scores) -> np.ndarray:
    """Z-score each trait column across the population (population sd)."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise DimensionError(f"need a population x 5 matrix with >= 2 rows, got {raw.shape}")
    mean = raw.mean(axis=0)
    centered = raw - mean
    sd = np.sqrt((centered**2).mean(axis=0))
    scale = np.maximum(np.abs(mean), 1.0)
    for i, s in enumerate(sd):
        if not s > 1e-12 * scale[i]:
            name = TRAITS[i] if raw.shape[1] == 5 else f"column {i}"
            raise NumericError(f"cannot standardize {name}: zero variance")
    return centered / sd


def dominance_ranking(traits) -> tuple:
    """Trait indices by descending absolute score; ties keep canonical O, C, E, A, N order."""
    t = np.asarray(traits, dtype=np.float64)
    return tuple(int(i) for i in np.argsort(-np.abs(t), kind="stable"))


def dominance_rankings(traits) -> np.ndarray:
    """Vectorised :func:`dominance_ranking` over the last axis."""
    t = np.asarray(traits, dtype=np.float64)
    return np.argsort(-np.abs(t), axis=-1, kind="stable")


def dominant_trait(traits) -> np.ndarray:
    return dominance_rankings(traits)[..., 0]


def window_stability(annual) -> float:
    """Fraction of customers whose dominant trait is the same in every year.

    ``annual`` is ``(T, 5)`` for one customer or ``(n, T, 5)``.
    """
    a = np.asarray(annual, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.shape[1] < 2:
        raise DimensionError("window stability needs at least 2 windows")
    dom = dominant_trait(a)
    return float(np.mean(np.all(dom == dom[:, :1], axis=1)))


@dataclass(frozen=True, eq=False)
class PersonalityScores:
    annual: np.ndarray  # (n, T, 5), standardised over all n*T rows
    overall: np.ndarray  # (n, 5), standardised over n customers
    annual_raw: np.ndarray
    overall_raw: np.ndarray

    @property
    def overall_dominance(self) -> np.ndarray:
        return dominance_rankings(self.overall)


def score_cube(cube, table: CoefficientTable) -> PersonalityScores:
    """Annual and overall personalities of every customer in a spending cube.

    Overall scores come from the whole-window spend; each window is
    standardised on its own population.
    """
    n, T, _ = cube.shape
    annual_raw = score(cube.spend, table)
    overall_raw = score(cube.overall_spend(), table)
    annual = standardize(annual_raw.reshape(n * T, 5)).reshape(n, T, 5)
    overall = standardize(overall_raw)
    return PersonalityScores(annual, overall, annual_raw, overall_raw)


def personality_records(cube, scores: PersonalityScores) -> list:
    records = []
    for k, cid in enumerate(cube.customer_ids):
        records.append(
            {
                "customer_id": cid,
                "window": "overall",
                "traits": scores.overall[k].tolist(),
                "dominance": list(dominance_ranking(scores.overall[k])),
            }
        )
        for t in range(scores.annual.shape[1]):
            records.append(
                {
                    "customer_id": cid,
                    "window": f"annual:{t}",
                    "traits": scores.annual[k, t].tolist(),
                    "dominance": list(dominance_ranking(scores.annual[k, t])),
                }
            )
    return records


def save_personality_jsonl(cube, scores: PersonalityScores, path):
    lines = [json.dumps(r) for r in personality_records(cube, scores)]
    return atomic_write_text(path, "\n".join(lines) + "\n")

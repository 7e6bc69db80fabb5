"""Matching-score data model: criteria, percentile normalization, pair eligibility."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

CRITERIA = ("M1", "M2", "M3", "M4", "M5")
ALL_CRITERIA = CRITERIA + ("MS",)
N_CRITERIA = len(CRITERIA)

RAW_MIN, RAW_MAX = 0.0, 5.0
MIN_NORMALIZATION_SAMPLES = 100


class Criterion(enum.Enum):
    M1 = "leisure activities"
    M2 = "general interests"
    M3 = "relationship preferences"
    M4 = "lifestyle"
    M5 = "value system"
    MS = "overall"

    @property
    def index(self) -> int:
        return ALL_CRITERIA.index(self.name)


class ScoreError(ValueError):
    pass


class DegenerateDistributionError(ScoreError):
    pass


class ConstantColumnError(ScoreError):
    pass


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    sex: str
    age: int
    traits: tuple[float, ...]
    image_ids: tuple[str, ...]
    split: str | None = None

    def __post_init__(self):
        if self.sex not in ("female", "male"):
            raise ScoreError(f"sex must be 'female' or 'male', got {self.sex!r}")
        if not self.image_ids:
            raise ScoreError(f"user {self.user_id} has no images")


PAIR_KINDS = ("normal", "same_sex", "self", "identity")


@dataclass(frozen=True)
class MatchPair:
    user_a: str
    user_b: str
    image_a: str
    image_b: str
    target: "ScoreVector"
    kind: str = "normal"

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise ScoreError(f"unknown pair kind {self.kind!r}")
        if self.kind == "identity" and (
            self.user_a != self.user_b or self.image_a != self.image_b
        ):
            raise ScoreError("an identity pair repeats one image of one user")
        if self.kind == "self" and (
            self.user_a != self.user_b or self.image_a == self.image_b
        ):
            raise ScoreError("a self pair joins two different images of one user")


@dataclass(frozen=True)
class NormalizationParams:
    """Per-criterion 1st/99th percentiles of the raw (distance) scores."""

    p_low: tuple[float, ...]
    p_high: tuple[float, ...]

    def __post_init__(self):
        if len(self.p_low) != N_CRITERIA or len(self.p_high) != N_CRITERIA:
            raise ScoreError("normalization needs one (p_low, p_high) per criterion")
        for name, lo, hi in zip(CRITERIA, self.p_low, self.p_high):
            if not lo < hi:
                raise DegenerateDistributionError(
                    f"{name}: p_low={lo} is not below p_high={hi}"
                )

    def to_records(self) -> list[dict]:
        return [
            {"criterion": name, "p_low": float(lo), "p_high": float(hi)}
            for name, lo, hi in zip(CRITERIA, self.p_low, self.p_high)
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> "NormalizationParams":
        by_name = {r["criterion"]: r for r in records}
        missing = [c for c in CRITERIA if c not in by_name]
        if missing:
            raise ScoreError(f"normalization records missing {missing}")
        return cls(
            p_low=tuple(float(by_name[c]["p_low"]) for c in CRITERIA),
            p_high=tuple(float(by_name[c]["p_high"]) for c in CRITERIA),
        )

    def adjust(self, raw) -> np.ndarray:
        """Adjust an (..., 5) array of raw scores criterion-wise."""
        raw = np.asarray(raw, dtype=np.float64)
        return adjust_score(raw, np.asarray(self.p_low), np.asarray(self.p_high))


@dataclass(frozen=True)
class ScoreVector:
    raw: tuple[float, ...]
    adjusted: tuple[float, ...]
    overall: float = field(init=False)

    def __post_init__(self):
        if len(self.raw) != N_CRITERIA or len(self.adjusted) != N_CRITERIA:
            raise ScoreError("a score vector holds exactly five criteria")
        object.__setattr__(self, "overall", overall_score(self.adjusted))

    @classmethod
    def from_raw(cls, raw, params: NormalizationParams) -> "ScoreVector":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw=tuple(raw.tolist()), adjusted=tuple(params.adjust(raw).tolist()))

    @classmethod
    def perfect(cls) -> "ScoreVector":
        """Target of a self or identity match."""
        return cls(raw=(0.0,) * N_CRITERIA, adjusted=(1.0,) * N_CRITERIA)

    def as_array(self) -> np.ndarray:
        """Adjusted M1..M5 followed by MS."""
        return np.array(self.adjusted + (self.overall,), dtype=np.float64)


def fit_normalization(raw_scores) -> NormalizationParams:
    """Fit 1st/99th percentiles per criterion on an (n, 5) array of raw scores.

    Percentiles use linear interpolation between order statistics.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != N_CRITERIA:
        raise ScoreError(f"expected an (n, {N_CRITERIA}) array, got shape {raw.shape}")
    if raw.shape[0] < MIN_NORMALIZATION_SAMPLES:
        raise ScoreError(
            f"{raw.shape[0]} samples is too few for a reliable 1st/99th percentile "
            f"(need >= {MIN_NORMALIZATION_SAMPLES})"
        )
    lo = np.percentile(raw, 1, axis=0, method="linear")
    hi = np.percentile(raw, 99, axis=0, method="linear")
    return NormalizationParams(p_low=tuple(lo.tolist()), p_high=tuple(hi.tolist()))


def adjust_score(raw, p_low, p_high):
    """Invert and rescale a raw distance so that p_low -> 1 and p_high -> 0, clamped."""
    raw = np.asarray(raw, dtype=np.float64)
    scaled = 1.0 - (raw - p_low) / (np.asarray(p_high) - p_low)
    out = np.clip(scaled, 0.0, 1.0)
    return out if out.ndim else float(out)


def overall_score(adjusted) -> float:
    values = np.asarray(adjusted, dtype=np.float64)
    if values.shape[-1] != N_CRITERIA:
        raise ScoreError("overall score averages exactly five criteria")
    return values.mean(axis=-1) if values.ndim > 1 else float(values.mean())


# age windows: a female accepts partners aged [age-5, age+10], a male [age-10, age+5]
AGE_WINDOWS = {"female": (-5, 10), "male": (-10, 5)}


def _in_window(user, partner) -> bool:
    lo, hi = AGE_WINDOWS[user.sex]
    return user.age + lo <= partner.age <= user.age + hi


def eligible(user_a, user_b, mode: str = "hetero") -> bool:
    """Whether two users form a candidate match under the age-window rule."""
    if user_a.user_id == user_b.user_id:
        raise ScoreError("eligibility is defined for distinct users")
    if mode == "hetero":
        if user_a.sex == user_b.sex:
            return False
        female, male = (user_a, user_b) if user_a.sex == "female" else (user_b, user_a)
        return _in_window(female, male)
    if mode == "same_sex":
        if user_a.sex != user_b.sex:
            return False
        return _in_window(user_a, user_b) or _in_window(user_b, user_a)
    raise ValueError(f"unknown eligibility mode {mode!r}")


def criterion_correlation(scores) -> np.ndarray:
    """5x5 Pearson correlation matrix between criteria over (n, 5) adjusted scores."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != N_CRITERIA:
        raise ScoreError(f"expected an (n, {N_CRITERIA}) array, got shape {x.shape}")
    if x.shape[0] < 3:
        raise ScoreError("correlation needs at least 3 samples")
    constant = np.ptp(x, axis=0) == 0
    if np.any(constant):
        bad = [CRITERIA[i] for i in np.flatnonzero(constant)]
        raise ConstantColumnError(f"constant criterion columns: {bad}")
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    corr = (centered.T @ centered) / np.outer(norms, norms)
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def eligibility_matrix(sexes, ages, mode: str = "hetero") -> np.ndarray:
    """Vectorized `eligible` over all ordered pairs; the diagonal is False."""
    female = np.asarray(sexes) == "female"
    ages = np.asarray(ages, dtype=np.int64)
    lo = np.where(female, AGE_WINDOWS["female"][0], AGE_WINDOWS["male"][0])
    hi = np.where(female, AGE_WINDOWS["female"][1], AGE_WINDOWS["male"][1])
    # row user's window contains the column user's age
    fits = (ages[None, :] >= ages[:, None] + lo[:, None]) & (
        ages[None, :] <= ages[:, None] + hi[:, None]
    )
    same = female[:, None] == female[None, :]
    if mode == "hetero":
        # rows are arbitrary; use the female's window on both orientations
        out = ~same & np.where(female[:, None], fits, fits.T)
    elif mode == "same_sex":
        out = same & (fits | fits.T)
    else:
        raise ValueError(f"unknown eligibility mode {mode!r}")
    np.fill_diagonal(out, False)
    return out

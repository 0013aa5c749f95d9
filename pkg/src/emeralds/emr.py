"""Seeded synthetic EMR records biased by nodule radiomics.

Four associations drive the generator:

* age rises with malignancy,
* male probability rises with lobulation,
* smoking probability rises with spiculation and solid internal texture,
* alcohol use rises with malignancy and falls for calcified nodules.

Randomness for each record is derived from a keyed hash of
``(seed, scan_id, nodule_ordinal)``, so a record never depends on where its
nodule sits in the input list.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import ndtr, ndtri

from .annotations import ConsensusNodule
from .errors import CohortTooSmall, ConfigError

__all__ = [
    "AGE_RANGE",
    "Alcohol",
    "BiasReport",
    "EmrBiasConfig",
    "EmrRecord",
    "Gender",
    "RuleStat",
    "Smoker",
    "format_cohort_csv",
    "generate_cohort",
    "generate_emr",
    "nodule_ordinals",
    "validate_bias",
]

AGE_RANGE = (18, 95)
MIN_COHORT = 100
# calcification is 1-6 with 6 = absent; below this the nodule counts as calcified
CALCIFIED_BELOW = 5.5


class Gender(str, enum.Enum):
    MALE = "Male"
    FEMALE = "Female"


class Smoker(str, enum.Enum):
    NEVER = "Never"
    FORMER = "Former"
    CURRENT = "Current"


class Alcohol(str, enum.Enum):
    NONE = "None"
    MODERATE = "Moderate"
    HEAVY = "Heavy"


@dataclass(frozen=True)
class EmrRecord:
    age_years: int
    gender: Gender
    smoker: Smoker
    alcohol: Alcohol

    def __post_init__(self):
        if not AGE_RANGE[0] <= self.age_years <= AGE_RANGE[1]:
            raise ValueError(f"age {self.age_years} outside {AGE_RANGE}")


@dataclass(frozen=True)
class EmrBiasConfig:
    age_mean: float
    age_sd: float
    age_shift_per_malignancy: float
    p_male_baseline: float
    p_male_given_high_lobulation: float
    p_smoker_baseline: float
    p_smoker_given_high_spiculation: float
    p_alcohol_baseline: float
    p_alcohol_given_malignant: float
    p_alcohol_given_calcified: float
    p_heavy_given_drinker: float
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("p_"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"{f.name}={p} is not a probability")
        if not self.age_sd > 0:
            raise ConfigError("age_sd must be positive")
        if not AGE_RANGE[0] <= self.age_mean <= AGE_RANGE[1]:
            raise ConfigError("age_mean must lie inside the age range")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "EmrBiasConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {line_no}: unrecognised entry {raw!r}")
            try:
                values[key] = int(value) if key == "seed" else float(value)
            except ValueError:
                raise ConfigError(f"line {line_no}: bad value for {key}") from None
        values.update(overrides)
        missing = [k for k, f in types.items() if k not in values and k != "seed"]
        if missing:
            raise ConfigError(f"missing EMR config keys: {', '.join(missing)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "EmrBiasConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    @classmethod
    def default(cls, **overrides) -> "EmrBiasConfig":
        text = resources.files("emeralds").joinpath("data/emr_default.conf").read_text()
        return cls.from_text(text, **overrides)

    @classmethod
    def zero_bias(cls, **overrides) -> "EmrBiasConfig":
        """Default baselines with every radiomic dependence switched off."""
        base = cls.default()
        null = replace(
            base,
            age_shift_per_malignancy=0.0,
            p_male_given_high_lobulation=base.p_male_baseline,
            p_smoker_given_high_spiculation=base.p_smoker_baseline,
            p_alcohol_given_malignant=base.p_alcohol_baseline,
            p_alcohol_given_calcified=base.p_alcohol_baseline,
        )
        return replace(null, **overrides)

    @property
    def is_null_bias(self) -> bool:
        return (self.age_shift_per_malignancy == 0.0
                and self.p_male_given_high_lobulation == self.p_male_baseline
                and self.p_smoker_given_high_spiculation == self.p_smoker_baseline
                and self.p_alcohol_given_malignant == self.p_alcohol_baseline
                and self.p_alcohol_given_calcified == self.p_alcohol_baseline)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())


def _uniforms(seed: int, scan_id: str, ordinal: int, n: int = 5) -> np.ndarray:
    """``n`` uniforms in (0, 1) keyed on the record identity."""
    h = hashlib.blake2b(f"{seed}\x1f{scan_id}\x1f{ordinal}".encode(), digest_size=8 * n)
    words = np.frombuffer(h.digest(), dtype="<u8") >> np.uint64(11)
    return (words.astype(np.float64) + 0.5) * 2.0**-53


def _ramp(x, lo, hi):
    return np.clip((np.asarray(x, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def _draw(cfg: EmrBiasConfig, u: np.ndarray, feats: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Vectorized record draw. ``u`` has shape (n, 5)."""
    malig = feats["malignancy"]

    # age: normal truncated to the age range, sampled by inverse CDF
    mu = cfg.age_mean + cfg.age_shift_per_malignancy * np.maximum(0.0, malig - 3.0)
    a = ndtr((AGE_RANGE[0] - mu) / cfg.age_sd)
    b = ndtr((AGE_RANGE[1] - mu) / cfg.age_sd)
    age = mu + cfg.age_sd * ndtri(a + u[:, 0] * (b - a))
    age = np.clip(np.floor(age + 0.5), *AGE_RANGE).astype(int)

    p_male = cfg.p_male_baseline + (
        cfg.p_male_given_high_lobulation - cfg.p_male_baseline) * _ramp(feats["lobulation"], 3, 5)
    male = u[:, 1] < p_male

    # solid texture (5) weighs in beside spiculation
    w = 0.7 * _ramp(feats["spiculation"], 1, 5) + 0.3 * _ramp(feats["internal_texture"], 1, 5)
    p_smoke = cfg.p_smoker_baseline + (
        cfg.p_smoker_given_high_spiculation - cfg.p_smoker_baseline) * w
    smoker = u[:, 2] < p_smoke
    current = u[:, 3] < 0.5

    p_drink_m = cfg.p_alcohol_baseline + (
        cfg.p_alcohol_given_malignant - cfg.p_alcohol_baseline) * _ramp(malig, 3, 5)
    calcified = np.clip(6.0 - feats["calcification"], 0.0, 1.0)
    p_drink = (1.0 - calcified) * p_drink_m + calcified * cfg.p_alcohol_given_calcified
    drinker = u[:, 4] < p_drink
    # given drinker, u4 / p_drink is again uniform on (0, 1)
    heavy = drinker & (u[:, 4] / np.maximum(p_drink, 1e-300) < cfg.p_heavy_given_drinker)
    return {"age": age, "male": male, "smoker": smoker, "current": current,
            "drinker": drinker, "heavy": heavy}


def _features(nodules: Sequence[ConsensusNodule]) -> Dict[str, np.ndarray]:
    r = [n.radiomics for n in nodules]
    return {
        "malignancy": np.array([n.malignancy_mean for n in nodules], dtype=float),
        "lobulation": np.array([x.lobulation for x in r], dtype=float),
        "spiculation": np.array([x.spiculation for x in r], dtype=float),
        "internal_texture": np.array([x.internal_texture for x in r], dtype=float),
        "calcification": np.array([x.calcification for x in r], dtype=float),
    }


def _records(draw: Dict[str, np.ndarray]) -> List[EmrRecord]:
    out = []
    for i in range(len(draw["age"])):
        smoker = (Smoker.NEVER if not draw["smoker"][i]
                  else Smoker.CURRENT if draw["current"][i] else Smoker.FORMER)
        alcohol = (Alcohol.NONE if not draw["drinker"][i]
                   else Alcohol.HEAVY if draw["heavy"][i] else Alcohol.MODERATE)
        out.append(EmrRecord(int(draw["age"][i]),
                             Gender.MALE if draw["male"][i] else Gender.FEMALE,
                             smoker, alcohol))
    return out


def generate_emr(n: ConsensusNodule, cfg: EmrBiasConfig, nodule_ordinal: int) -> EmrRecord:
    u = _uniforms(cfg.seed, n.scan_id, nodule_ordinal)[None, :]
    return _records(_draw(cfg, u, _features([n])))[0]


def nodule_ordinals(nodules: Sequence[ConsensusNodule]) -> List[int]:
    """Rank of each nodule among nodules of the same scan, ordered by center.

    The ordinal is intrinsic to the nodule set, not to list position.
    """
    per_scan: Dict[str, list] = {}
    for i, n in enumerate(nodules):
        per_scan.setdefault(n.scan_id, []).append(i)
    ordinals = [0] * len(nodules)
    for idx in per_scan.values():
        idx.sort(key=lambda i: (nodules[i].center_world, nodules[i].diameter_mm))
        for rank, i in enumerate(idx):
            ordinals[i] = rank
    return ordinals


def generate_cohort(nodules: Sequence[ConsensusNodule], cfg: EmrBiasConfig) -> List[EmrRecord]:
    if not nodules:
        raise ValueError("nodule list is empty")
    ordinals = nodule_ordinals(nodules)
    u = np.stack([_uniforms(cfg.seed, n.scan_id, o) for n, o in zip(nodules, ordinals)])
    return _records(_draw(cfg, u, _features(nodules)))


def format_cohort_csv(nodules: Sequence[ConsensusNodule], records: Sequence[EmrRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scan_id", "nodule_ordinal", "age", "gender", "smoker", "alcohol"])
    for n, o, r in zip(nodules, nodule_ordinals(nodules), records):
        w.writerow([n.scan_id, o, r.age_years, r.gender.value, r.smoker.value, r.alcohol.value])
    return buf.getvalue()


@dataclass(frozen=True)
class RuleStat:
    """Group comparison for one bias rule.

    ``z`` is signed so that a positive value means the effect points in the
    expected clinical direction.
    """

    rule: str
    statistic: str
    group_high: str
    group_low: str
    n_high: int
    n_low: int
    value_high: float
    value_low: float
    z: float


@dataclass(frozen=True)
class BiasReport:
    rules: Tuple[RuleStat, ...]
    cohort_size: int

    def rule(self, name: str) -> RuleStat:
        for r in self.rules:
            if r.rule == name:
                return r
        raise KeyError(name)

    def directional(self, z_min: float = 3.0) -> bool:
        return all(r.z > z_min for r in self.rules)

    def max_abs_z(self) -> float:
        return max(abs(r.z) for r in self.rules)

    def as_dict(self) -> dict:
        return {"cohort_size": self.cohort_size, "rules": [asdict(r) for r in self.rules]}


def _prop_z(hit: np.ndarray, group: np.ndarray) -> Tuple[int, int, float, float, float]:
    n1, n0 = int(group.sum()), int((~group).sum())
    if n1 == 0 or n0 == 0:
        return n1, n0, math.nan, math.nan, math.nan
    p1, p0 = hit[group].mean(), hit[~group].mean()
    pooled = hit.mean()
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n0))
    z = 0.0 if se == 0 else (p1 - p0) / se
    return n1, n0, float(p1), float(p0), float(z)


def _mean_z(x: np.ndarray, group: np.ndarray) -> Tuple[int, int, float, float, float]:
    n1, n0 = int(group.sum()), int((~group).sum())
    if n1 < 2 or n0 < 2:
        return n1, n0, math.nan, math.nan, math.nan
    a, b = x[group], x[~group]
    se = math.sqrt(a.var(ddof=1) / n1 + b.var(ddof=1) / n0)
    z = 0.0 if se == 0 else (a.mean() - b.mean()) / se
    return n1, n0, float(a.mean()), float(b.mean()), float(z)


def validate_bias(cohort: Sequence[Tuple[ConsensusNodule, EmrRecord]]) -> BiasReport:
    """Test each bias rule with a two-group z statistic."""
    if len(cohort) < MIN_COHORT:
        raise CohortTooSmall(f"need at least {MIN_COHORT} records, got {len(cohort)}")
    nodules = [n for n, _ in cohort]
    recs = [r for _, r in cohort]
    feats = _features(nodules)
    age = np.array([r.age_years for r in recs], dtype=float)
    smoker = np.array([r.smoker is not Smoker.NEVER for r in recs])
    drinker = np.array([r.alcohol is not Alcohol.NONE for r in recs])
    male = np.array([r.gender is Gender.MALE for r in recs])

    rules = []
    n1, n0, v1, v0, z = _mean_z(age, feats["malignancy"] > 3.0)
    rules.append(RuleStat("age_by_malignancy", "mean_age", "malignancy>3", "malignancy<=3",
                          n1, n0, v1, v0, z))
    n1, n0, v1, v0, z = _prop_z(smoker, feats["spiculation"] > 3.0)
    rules.append(RuleStat("smoking_by_spiculation", "smoker_rate", "spiculation>3",
                          "spiculation<=3", n1, n0, v1, v0, z))
    n1, n0, v1, v0, z = _prop_z(drinker, feats["calcification"] >= CALCIFIED_BELOW)
    rules.append(RuleStat("alcohol_by_calcification", "drinker_rate", "non-calcified",
                          "calcified", n1, n0, v1, v0, z))
    n1, n0, v1, v0, z = _prop_z(male, feats["lobulation"] > 3.0)
    rules.append(RuleStat("gender_by_lobulation", "male_rate", "lobulation>3",
                          "lobulation<=3", n1, n0, v1, v0, z))
    return BiasReport(tuple(rules), len(cohort))

import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from emeralds.annotations import ConsensusNodule, RadiomicVector
from emeralds.emr import (
    Alcohol,
    EmrBiasConfig,
    EmrRecord,
    Gender,
    Smoker,
    format_cohort_csv,
    generate_cohort,
    generate_emr,
    nodule_ordinals,
    validate_bias,
)
from emeralds.errors import CohortTooSmall, ConfigError
from emeralds.synthetic import random_consensus_nodules


def nodule(scan="S0", x=0.0, malignancy=3.5, spiculation=3.0, lobulation=3.0,
           calcification=6.0, texture=3.0):
    rad = RadiomicVector(3.0, texture, spiculation, 3.0, lobulation, calcification, 3.0)
    return ConsensusNodule(scan, (x, 0.0, 0.0), 6.0, rad, malignancy, 4)


def fixed(n, **kw):
    return [nodule(scan=f"S{i:05d}", **kw) for i in range(n)]


def test_default_config_values():
    cfg = EmrBiasConfig.default()
    assert (cfg.age_mean, cfg.age_sd, cfg.age_shift_per_malignancy) == (55, 8, 4)
    assert cfg.p_smoker_baseline == 0.35
    assert cfg.p_smoker_given_high_spiculation == 0.75
    assert cfg.p_male_given_high_lobulation == 0.65
    assert cfg.p_alcohol_given_malignant == 0.45
    assert cfg.p_alcohol_given_calcified == 0.15
    assert not cfg.is_null_bias
    assert EmrBiasConfig.zero_bias().is_null_bias


def test_config_text_round_trip(tmp_path):
    cfg = EmrBiasConfig.default(seed=2**63 + 5, p_smoker_baseline=0.2)
    path = tmp_path / "emr.conf"
    path.write_text(cfg.to_text())
    assert EmrBiasConfig.from_file(path) == cfg


@pytest.mark.parametrize("text", [
    "p_smoker_baseline = 1.5",
    "nonsense = 1",
    "p_smoker_baseline = abc",
    "age_sd = 0",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        EmrBiasConfig.from_text(EmrBiasConfig.default().to_text() + text + "\n")


def test_config_missing_key():
    with pytest.raises(ConfigError):
        EmrBiasConfig.from_text("age_mean = 55\n")


def test_record_age_range():
    with pytest.raises(ValueError):
        EmrRecord(17, Gender.MALE, Smoker.NEVER, Alcohol.NONE)


def test_generate_emr_deterministic():
    cfg = EmrBiasConfig.default(seed=11)
    n = nodule()
    assert generate_emr(n, cfg, 0) == generate_emr(n, cfg, 0)
    assert generate_cohort([n], cfg) == [generate_emr(n, cfg, 0)]


def test_cohort_bytes_repeatable():
    nods = random_consensus_nodules(500, seed=4)
    cfg = EmrBiasConfig.default(seed=9)
    a = format_cohort_csv(nods, generate_cohort(nods, cfg))
    b = format_cohort_csv(nods, generate_cohort(nods, cfg))
    assert a.encode() == b.encode()


def test_marginal_validity():
    nods = random_consensus_nodules(3000, seed=1)
    extreme = fixed(500, malignancy=5.0) + fixed(500, malignancy=1.0)
    for rec in generate_cohort(nods + extreme, EmrBiasConfig.default(age_sd=30.0)):
        assert 18 <= rec.age_years <= 95
        assert isinstance(rec.gender, Gender)
        assert isinstance(rec.smoker, Smoker)
        assert isinstance(rec.alcohol, Alcohol)


def test_null_bias_rates_match_baselines():
    cfg = EmrBiasConfig.zero_bias(seed=3)
    nods = random_consensus_nodules(10_000, seed=8)
    recs = generate_cohort(nods, cfg)
    n = len(recs)

    def close(rate, p):
        assert abs(rate - p) < 4 * math.sqrt(p * (1 - p) / n)

    close(np.mean([r.gender is Gender.MALE for r in recs]), cfg.p_male_baseline)
    close(np.mean([r.smoker is not Smoker.NEVER for r in recs]), cfg.p_smoker_baseline)
    close(np.mean([r.alcohol is not Alcohol.NONE for r in recs]), cfg.p_alcohol_baseline)
    ages = np.array([r.age_years for r in recs])
    assert abs(ages.mean() - cfg.age_mean) < 4 * cfg.age_sd / math.sqrt(n)


def test_age_shift_oracle():
    cfg = EmrBiasConfig.default(seed=5)
    high = np.array([r.age_years for r in generate_cohort(fixed(10_000, malignancy=5.0), cfg)])
    low = np.array([r.age_years for r in
                    generate_cohort([replace(n, scan_id="L" + n.scan_id)
                                     for n in fixed(10_000, malignancy=1.0)], cfg)])
    se = math.sqrt(high.var(ddof=1) / high.size + low.var(ddof=1) / low.size)
    assert abs((high.mean() - low.mean()) - 2 * cfg.age_shift_per_malignancy) < 3 * se


def test_directionality_extremes():
    cfg = EmrBiasConfig.default(seed=6)

    def rate(nods, pred):
        return np.mean([pred(r) for r in generate_cohort(nods, cfg)])

    smoke = lambda r: r.smoker is not Smoker.NEVER  # noqa: E731
    drink = lambda r: r.alcohol is not Alcohol.NONE  # noqa: E731
    assert rate(fixed(10_000, spiculation=5.0), smoke) > rate(fixed(10_000, spiculation=1.0), smoke)
    assert rate(fixed(10_000, calcification=1.0), drink) < rate(fixed(10_000, calcification=6.0), drink)
    male = lambda r: r.gender is Gender.MALE  # noqa: E731
    assert rate(fixed(10_000, lobulation=5.0), male) > rate(fixed(10_000, lobulation=1.0), male)


def test_smoker_split_is_even():
    cfg = EmrBiasConfig.default(p_smoker_baseline=1.0, p_smoker_given_high_spiculation=1.0)
    recs = generate_cohort(fixed(10_000), cfg)
    current = np.mean([r.smoker is Smoker.CURRENT for r in recs])
    assert abs(current - 0.5) < 4 * math.sqrt(0.25 / 10_000)


def test_permutation_equivariance():
    nods = random_consensus_nodules(400, seed=2)
    cfg = EmrBiasConfig.default(seed=1)
    base = generate_cohort(nods, cfg)
    perm = np.random.default_rng(0).permutation(len(nods))
    shuffled = generate_cohort([nods[i] for i in perm], cfg)
    assert shuffled == [base[i] for i in perm]
    assert nodule_ordinals([nods[i] for i in perm]) == [nodule_ordinals(nods)[i] for i in perm]


def test_singleton_cohort():
    assert len(generate_cohort([nodule()], EmrBiasConfig.default())) == 1
    with pytest.raises(ValueError):
        generate_cohort([], EmrBiasConfig.default())


def test_different_seeds_differ():
    nods = random_consensus_nodules(100, seed=0)
    a = generate_cohort(nods, EmrBiasConfig.default(seed=1))
    b = generate_cohort(nods, EmrBiasConfig.default(seed=2))
    assert a != b
    assert sum(x != y for x, y in zip(a, b)) >= 90


def test_validate_bias_default_cohort():
    nods = random_consensus_nodules(10_000, seed=0)
    recs = generate_cohort(nods, EmrBiasConfig.default())
    report = validate_bias(list(zip(nods, recs)))
    assert report.rule("smoking_by_spiculation").z > 3
    assert report.directional(3.0)
    for r in report.rules:
        assert r.n_high + r.n_low == len(nods)


def test_validate_bias_too_small():
    nods = random_consensus_nodules(50, seed=0)
    recs = generate_cohort(nods, EmrBiasConfig.default())
    with pytest.raises(CohortTooSmall):
        validate_bias(list(zip(nods, recs)))


def test_validate_bias_group_stats_oracle():
    nods = random_consensus_nodules(2000, seed=7)
    recs = generate_cohort(nods, EmrBiasConfig.default())
    rule = validate_bias(list(zip(nods, recs))).rule("smoking_by_spiculation")
    hi = [r.smoker is not Smoker.NEVER for n, r in zip(nods, recs) if n.radiomics.spiculation > 3]
    lo = [r.smoker is not Smoker.NEVER for n, r in zip(nods, recs) if n.radiomics.spiculation <= 3]
    p1, p0 = sum(hi) / len(hi), sum(lo) / len(lo)
    p = (sum(hi) + sum(lo)) / (len(hi) + len(lo))
    z = (p1 - p0) / math.sqrt(p * (1 - p) * (1 / len(hi) + 1 / len(lo)))
    assert (rule.n_high, rule.n_low) == (len(hi), len(lo))
    assert rule.z == pytest.approx(z, rel=1e-12)


def test_cohort_csv_columns():
    nods = [nodule(x=5.0), nodule(x=1.0)]
    text = format_cohort_csv(nods, generate_cohort(nods, EmrBiasConfig.default()))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["scan_id", "nodule_ordinal", "age", "gender", "smoker", "alcohol"]
    assert [r["nodule_ordinal"] for r in rows] == ["1", "0"]

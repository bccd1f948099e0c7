import io
import json
import math

import numpy as np
import pytest

from fleetemit.ingest import parse_certifications, parse_inspections, qc_filter
from fleetemit.matching import record_fleet
from fleetemit.synth import (
    GeneratorSpec,
    SynthCorpus,
    calibrate_noise,
    generate,
    true_value,
    write_corpus,
)


def corpus_bytes(corpus: SynthCorpus) -> bytes:
    from fleetemit.ingest import write_certifications, write_inspections

    a, b = io.StringIO(), io.StringIO()
    write_inspections(corpus.records, a)
    write_certifications(corpus.measurements, b)
    blob = a.getvalue() + b.getvalue() + json.dumps(corpus.manifest, sort_keys=True)
    return blob.encode()


# ---------------------------------------------------------------------------
# calibrate_noise


def test_calibrate_noise_closed_form():
    assert calibrate_noise(1.0, 100.0) == 0.0
    assert calibrate_noise(0.9, 100.0) == pytest.approx(math.sqrt(100 / 9))
    assert calibrate_noise(0.5, 1.0) == pytest.approx(1.0)


def test_calibrate_noise_rejects_bad_inputs():
    with pytest.raises(ValueError):
        calibrate_noise(0.0, 100.0)
    with pytest.raises(ValueError):
        calibrate_noise(0.9, 0.0)


def test_retest_correlation_matches_target():
    rng = np.random.default_rng(0)
    n = 100_000
    truths = rng.normal(100.0, 10.0, n)
    sigma = calibrate_noise(0.9, float(np.var(truths)))
    a = truths + rng.normal(0, sigma, n)
    b = truths + rng.normal(0, sigma, n)
    r = float(np.corrcoef(a, b)[0, 1])
    assert abs(r - 0.9) < 0.01


# ---------------------------------------------------------------------------
# generate


@pytest.fixture(scope="module")
def small_corpus():
    return generate(GeneratorSpec(seed=11, vehicles=3000, n_regions=8,
                                  inject_dual=3, inject_impossible=4, inject_overage=5))


def test_same_seed_byte_identical():
    spec = GeneratorSpec(seed=7, vehicles=500, n_regions=4)
    assert corpus_bytes(generate(spec)) == corpus_bytes(generate(spec))


def test_different_seed_differs():
    a = generate(GeneratorSpec(seed=7, vehicles=500, n_regions=4))
    b = generate(GeneratorSpec(seed=8, vehicles=500, n_regions=4))
    assert corpus_bytes(a) != corpus_bytes(b)


def test_zero_sigma_values_exactly_true(small_corpus):
    spec = GeneratorSpec(seed=3, vehicles=400, retest_r=None, n_regions=4)
    corpus = generate(spec)
    for m in corpus.measurements[:200]:
        expected = true_value(corpus.manifest, "co2_g_km", m.model_year,
                              2600.0 if m.model.startswith("L") else 1500.0, m.fuel_type)
        assert m.co2_g_km == pytest.approx(expected, abs=1e-12)


def test_injected_qc_counts_match_report(small_corpus):
    clean, report = qc_filter(small_corpus.records)
    injected = small_corpus.manifest["injected_qc"]
    assert report.counts["dual_disposition"] == injected["dual_disposition"]
    assert report.counts["impossible_dates"] == injected["impossible_dates"]
    assert report.counts["over_110_years"] == injected["over_110_years"]
    assert report.counts["missing_required_field"] == 0
    assert report.reconciles()
    assert len(clean) == small_corpus.manifest["vehicles"]


def test_generated_corpus_parses_cleanly(small_corpus, tmp_path):
    paths = write_corpus(small_corpus, tmp_path)
    records, diags = parse_inspections(paths["inspections"])
    assert diags == []
    assert len(records) == len(small_corpus.records)
    measurements, diags = parse_certifications(paths["certifications"])
    assert diags == []
    assert len(measurements) == len(small_corpus.measurements)


def test_fleet_means_match_manifest_within_3se(small_corpus):
    manifest = small_corpus.manifest
    clean, _ = qc_filter(small_corpus.records)
    for fleet in ("exported", "scrapped"):
        members = [r for r in clean if record_fleet(r) == fleet]
        values = np.array([
            true_value(manifest, "co2_g_km", r.first_use_date.year, r.engine_cc, r.fuel_type)
            for r in members
        ])
        se = values.std() / math.sqrt(len(values))
        assert abs(values.mean() - manifest["fleet_true_means"][fleet]["co2_g_km"]) < 3 * se


def test_configured_gap_is_exact_in_manifest():
    spec = GeneratorSpec(seed=1, vehicles=100,
                         fleet_offsets={"co2_g_km": 22.6, "nox_mg_km": 24.0,
                                        "thc_mg_km": 0.0, "co_mg_km": 40.0, "mpg": -3.3})
    corpus = generate(spec)
    means = corpus.manifest["fleet_true_means"]
    assert means["exported"]["co2_g_km"] - means["scrapped"]["co2_g_km"] == pytest.approx(22.6)
    assert means["scrapped"]["co2_g_km"] == pytest.approx(174.4)


def test_region_signs_realized_exactly():
    spec = GeneratorSpec(seed=5, vehicles=200, n_regions=40, region_positive_fraction=0.95)
    corpus = generate(spec)
    signs = corpus.manifest["region_signs"]
    assert sum(1 for s in signs.values() if s > 0) == 38
    assert corpus.manifest["region_positive_fraction"] == pytest.approx(0.95)


def test_cert_repeats_and_match_rate():
    spec = GeneratorSpec(seed=2, vehicles=2000, cert_repeats=3, match_rate=0.5, n_regions=4)
    corpus = generate(spec)
    keys = {(m.make, m.model, m.model_year, m.fuel_type) for m in corpus.measurements}
    assert len(corpus.measurements) == 3 * len(keys)
    realized = corpus.manifest["n_keys"]
    assert 0.35 * realized < len(keys) < 0.65 * realized


def test_infeasible_specs_rejected():
    with pytest.raises(ValueError, match="region"):
        generate(GeneratorSpec(n_regions=0))
    with pytest.raises(ValueError, match="shares"):
        generate(GeneratorSpec(fleet_shares={"exported": 1.0, "scrapped": 0.5, "on_road": 0.0}))
    with pytest.raises(ValueError, match="infeasible"):
        generate(GeneratorSpec(class_tilt=0.9))  # 0.25 + 0.9 > 1


def test_sparse_regions_stay_small():
    spec = GeneratorSpec(seed=9, vehicles=5000, n_regions=6, sparse_regions=3,
                         sparse_vehicles_each=8)
    corpus = generate(spec)
    counts = {}
    for r in corpus.records:
        counts[r.postcode_region] = counts.get(r.postcode_region, 0) + 1
    for name in corpus.manifest["sparse_regions"]:
        assert counts.get(name, 0) < 30

"""Seeded synthetic inspection and certification corpora with known truth.

The true emissions function is piecewise constant over (model year band,
engine class, fuel type), so the tree model class contains it exactly.
Fleet gaps are engineered through a single lever: exported vehicles draw
large engines more often than scrapped ones, and every pollutant responds
to the lever with its own affine coefficient. Year and fuel effects are
distributed identically across fleets, so the configured exported minus
scrapped offsets are exact expectations, recorded in the manifest next to
the full cell table.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Optional

import numpy as np

from fleetemit.features import POLLUTANTS
from fleetemit.fleet import DEFAULT_WINDOW, Window
from fleetemit.ingest import (
    EmissionsMeasurement,
    TestEvent,
    VehicleRecord,
    write_certifications,
    write_inspections,
)

FUEL_DISTRIBUTION = {
    "DIE": 0.35, "PET": 0.45, "CNG": 0.05, "ELD": 0.05, "HYB": 0.05, "LPG": 0.05,
}

POLLUTANT_BASES = {
    "co2_g_km": 174.4, "nox_mg_km": 160.0, "thc_mg_km": 45.0,
    "co_mg_km": 380.0, "mpg": 41.8,
}

DEFAULT_FLEET_OFFSETS = {
    "co2_g_km": 22.6, "nox_mg_km": 24.0, "thc_mg_km": 0.0,
    "co_mg_km": 40.0, "mpg": -3.3,
}

# per-bin effects as fractions of the base level, oldest band first
YEAR_EFFECT_FRACS = {
    "co2_g_km": (0.10, 0.04, -0.02, -0.08),
    "nox_mg_km": (0.08, 0.03, -0.02, -0.06),
    "thc_mg_km": (0.08, 0.03, -0.02, -0.06),
    "co_mg_km": (0.08, 0.03, -0.02, -0.06),
    "mpg": (-0.10, -0.04, 0.02, 0.08),
}

FUEL_EFFECT_FRACS = {
    "DIE": {"co2_g_km": 0.06, "nox_mg_km": 0.50, "thc_mg_km": -0.08,
            "co_mg_km": -0.12, "mpg": 0.12},
    "PET": {},
    "CNG": {"co2_g_km": -0.06, "nox_mg_km": -0.20, "thc_mg_km": 0.05,
            "co_mg_km": 0.08, "mpg": 0.02},
    "ELD": {"co2_g_km": -0.12, "nox_mg_km": 0.20, "thc_mg_km": -0.04,
            "co_mg_km": -0.06, "mpg": 0.25},
    "HYB": {"co2_g_km": -0.15, "nox_mg_km": -0.30, "thc_mg_km": -0.05,
            "co_mg_km": -0.05, "mpg": 0.30},
    "LPG": {"co2_g_km": -0.04, "nox_mg_km": -0.15, "thc_mg_km": 0.06,
            "co_mg_km": 0.10, "mpg": 0.0},
}

SMALL_CC_RANGE = (1200.0, 2000.0)
LARGE_CC_RANGE = (2500.0, 4000.0)
CC_CLASS_BOUNDARY = 2250.0

N_YEAR_BINS = 4


def calibrate_noise(target_retest_r: float, true_variance: float) -> float:
    """Noise sigma giving duplicate draws the requested correlation.

    Two independent noisy draws of the same true value correlate at
    r = V / (V + sigma^2), so sigma = sqrt(V (1 - r) / r).
    """
    if not 0 < target_retest_r <= 1:
        raise ValueError("target retest correlation must be in (0, 1]")
    if true_variance <= 0:
        raise ValueError("true-value variance must be positive")
    return math.sqrt(true_variance * (1.0 - target_retest_r) / target_retest_r)


@dataclass
class GeneratorSpec:
    seed: int = 0
    vehicles: int = 10_000
    window: Window = DEFAULT_WINDOW
    fleet_shares: dict = field(default_factory=lambda: {
        "exported": 0.25, "scrapped": 0.25, "on_road": 0.5})
    base_levels: dict = field(default_factory=lambda: dict(POLLUTANT_BASES))
    fleet_offsets: dict = field(default_factory=lambda: dict(DEFAULT_FLEET_OFFSETS))
    retest_r: Optional[float] = 0.9
    noise_sigma: Optional[dict] = None  # explicit sigmas override retest_r
    n_regions: int = 20
    region_positive_fraction: float = 1.0
    negative_region_delta: float = -0.2
    sparse_regions: int = 0
    sparse_vehicles_each: int = 8
    models_per_class: int = 30
    cert_repeats: int = 2
    match_rate: float = 1.0
    first_use_years: tuple = (2000, 2014)
    class_tilt: float = 0.5  # exported-minus-scrapped large-engine share
    scrapped_large_share: float = 0.25
    on_road_large_share: float = 0.20
    inject_dual: int = 0
    inject_impossible: int = 0
    inject_overage: int = 0

    def validate(self) -> None:
        if self.vehicles < 0:
            raise ValueError("vehicles must be nonnegative")
        if abs(sum(self.fleet_shares.values()) - 1.0) > 1e-9:
            raise ValueError("fleet shares must sum to 1")
        if self.n_regions < 1:
            raise ValueError("at least one region is required")
        if not 0 < self.region_positive_fraction <= 1:
            raise ValueError("region_positive_fraction must be in (0, 1]")
        if self.noise_sigma is not None and any(s < 0 for s in self.noise_sigma.values()):
            raise ValueError("noise sigma must be nonnegative")
        if not 0 <= self.match_rate <= 1:
            raise ValueError("match_rate must be in [0, 1]")
        if self.cert_repeats < 1:
            raise ValueError("cert_repeats must be positive")
        if self.first_use_years[1] < self.first_use_years[0]:
            raise ValueError("bad first_use_years range")
        # the per-region tilts must stay valid engine-class probabilities
        for delta in self._region_deltas():
            share = self.scrapped_large_share + delta
            if not 0 <= share <= 1:
                raise ValueError(
                    f"infeasible spec: exported large-engine share {share:.3f} outside [0, 1]")

    def _region_deltas(self) -> tuple:
        """(positive-region delta, negative-region delta) for the lever."""
        frac = self.region_positive_fraction
        if frac == 1.0:
            return (self.class_tilt, self.class_tilt)
        negative = self.negative_region_delta
        positive = (self.class_tilt - (1 - frac) * negative) / frac
        return (positive, negative)


def _year_bin(year: int, edges) -> int:
    k = 0
    for i, edge in enumerate(edges):
        if year >= edge:
            k = i
    return k


@dataclass
class TrueModel:
    """The piecewise-constant emissions function and its analytic means."""

    year_edges: list
    a: dict  # pollutant -> intercept
    b: dict  # pollutant -> large-engine lever coefficient
    year_effects: dict  # pollutant -> per-bin values
    fuel_effects: dict  # pollutant -> fuel -> value

    def value(self, pollutant: str, year: int, large_engine: bool, fuel: str) -> float:
        return (
            self.a[pollutant]
            + self.b[pollutant] * (1.0 if large_engine else 0.0)
            + self.year_effects[pollutant][_year_bin(year, self.year_edges)]
            + self.fuel_effects[pollutant].get(fuel, 0.0)
        )


def build_true_model(spec: GeneratorSpec) -> TrueModel:
    lo, hi = spec.first_use_years
    span = hi - lo + 1
    year_edges = [lo + (span * k) // N_YEAR_BINS for k in range(N_YEAR_BINS)]
    years = list(range(lo, hi + 1))
    a, b, year_effects, fuel_effects = {}, {}, {}, {}
    for p in POLLUTANTS:
        base = spec.base_levels[p]
        b[p] = spec.fleet_offsets[p] / spec.class_tilt
        year_effects[p] = [f * base for f in YEAR_EFFECT_FRACS[p]]
        fuel_effects[p] = {fuel: fracs.get(p, 0.0) * base
                           for fuel, fracs in FUEL_EFFECT_FRACS.items()}
        # the intercept pins the scrapped-fleet expectation at the base level
        mean_year = sum(year_effects[p][_year_bin(y, year_edges)] for y in years) / len(years)
        mean_fuel = sum(FUEL_DISTRIBUTION[f] * fuel_effects[p][f] for f in FUEL_DISTRIBUTION)
        a[p] = base - b[p] * spec.scrapped_large_share - mean_year - mean_fuel
    return TrueModel(year_edges, a, b, year_effects, fuel_effects)


@dataclass(frozen=True)
class _Model:
    make: str
    name: str
    large: bool
    nominal_cc: float


@dataclass
class SynthCorpus:
    records: list
    measurements: list
    manifest: dict


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def _pick(rng: np.random.Generator, distribution: dict) -> str:
    u = rng.random()
    acc = 0.0
    for name, share in distribution.items():
        acc += share
        if u < acc:
            return name
    return name  # float tail


def generate(spec: GeneratorSpec) -> SynthCorpus:
    """Deterministic corpus for a spec; same seed gives identical output."""
    spec.validate()
    truth = build_true_model(spec)
    rng0 = np.random.default_rng((spec.seed, 0))

    vocabulary = []
    for large, prefix, (cc_lo, cc_hi) in (
        (False, "S", SMALL_CC_RANGE), (True, "L", LARGE_CC_RANGE)
    ):
        for k in range(spec.models_per_class):
            vocabulary.append(_Model(
                make=f"MK{int(rng0.integers(0, 10)):02d}",
                name=f"{prefix}{k:03d}",
                large=large,
                nominal_cc=float(np.round(rng0.uniform(cc_lo, cc_hi))),
            ))
    small_models = [m for m in vocabulary if not m.large]
    large_models = [m for m in vocabulary if m.large]

    regions = [f"R{i:03d}" for i in range(spec.n_regions)]
    n_positive = int(round(spec.region_positive_fraction * spec.n_regions))
    signs = np.array([1] * n_positive + [-1] * (spec.n_regions - n_positive))
    rng0.shuffle(signs)
    region_sign = dict(zip(regions, (int(s) for s in signs)))
    sparse = [f"SP{i:02d}" for i in range(spec.sparse_regions)]
    sparse_share = (
        spec.sparse_regions * spec.sparse_vehicles_each / spec.vehicles
        if spec.vehicles else 0.0
    )
    delta_pos, delta_neg = spec._region_deltas()

    records = []
    realized_keys = {}
    for i in range(spec.vehicles):
        rng = np.random.default_rng((spec.seed, 1, i))
        if sparse and rng.random() < sparse_share:
            region = sparse[int(rng.integers(0, len(sparse)))]
            sign = 1
        else:
            region = regions[int(rng.integers(0, spec.n_regions))]
            sign = region_sign[region]
        fleet = _pick(rng, spec.fleet_shares)
        fuel = _pick(rng, FUEL_DISTRIBUTION)
        year = int(rng.integers(spec.first_use_years[0], spec.first_use_years[1] + 1))
        if fleet == "exported":
            large_share = spec.scrapped_large_share + (delta_pos if sign > 0 else delta_neg)
        elif fleet == "scrapped":
            large_share = spec.scrapped_large_share
        else:
            large_share = spec.on_road_large_share
        large = rng.random() < large_share
        pool = large_models if large else small_models
        model = pool[int(rng.integers(0, len(pool)))]
        first_use = date(year, int(rng.integers(1, 13)), int(rng.integers(1, 29)))

        tests = []
        for k in range(int(rng.integers(2, 4))):
            tests.append(TestEvent(
                test_date=date(year + 3 + k, int(rng.integers(1, 13)), int(rng.integers(1, 29))),
                outcome="pass" if rng.random() < 0.8 else "fail",
                odometer=int(rng.integers(20_000, 150_000)),
            ))
        export_date = scrap_date = None
        if fleet in ("exported", "scrapped"):
            disposition = tests[-1].test_date + timedelta(days=int(rng.integers(30, 400)))
            disposition = min(max(disposition, spec.window.start), spec.window.end)
            if fleet == "exported":
                export_date = disposition
            else:
                scrap_date = disposition

        records.append(VehicleRecord(
            vehicle_id=f"V{i:07d}", make=model.make, model=model.name,
            fuel_type=fuel, engine_cc=model.nominal_cc, test_class=4,
            first_use_date=first_use, tests=tests, postcode_region=region,
            export_date=export_date, scrap_date=scrap_date,
        ))
        realized_keys[(model.make, model.name, year, fuel)] = model

    records.extend(_invalid_records(spec, vocabulary[0]))

    measurements, sigma, clamped = _certifications(spec, truth, realized_keys)
    manifest = _manifest(spec, truth, sigma, len(realized_keys), len(measurements),
                         clamped, region_sign, sparse)
    return SynthCorpus(records=records, measurements=measurements, manifest=manifest)


def _invalid_records(spec: GeneratorSpec, model: _Model) -> list:
    """Records crafted to trip exactly one QC rule each."""
    out = []
    for j in range(spec.inject_dual):
        out.append(VehicleRecord(
            vehicle_id=f"QD{j:05d}", make=model.make, model=model.name,
            fuel_type="PET", engine_cc=model.nominal_cc, test_class=4,
            first_use_date=date(2006, 1, 1),
            export_date=date(2015, 5, 1), scrap_date=date(2015, 6, 1),
        ))
    for j in range(spec.inject_impossible):
        out.append(VehicleRecord(
            vehicle_id=f"QI{j:05d}", make=model.make, model=model.name,
            fuel_type="PET", engine_cc=model.nominal_cc, test_class=4,
            first_use_date=date(2010, 6, 1),
            export_date=date(2010, 2, 1),  # before first use
        ))
    for j in range(spec.inject_overage):
        out.append(VehicleRecord(
            vehicle_id=f"QA{j:05d}", make=model.make, model=model.name,
            fuel_type="PET", engine_cc=model.nominal_cc, test_class=4,
            first_use_date=date(1900, 1, 1),
            export_date=date(2011, 1, 15),  # 111 years old
        ))
    return out


def _certifications(spec: GeneratorSpec, truth: TrueModel, realized_keys: dict):
    keys = sorted(realized_keys)
    true_by_key = {
        key: {p: truth.value(p, key[2], realized_keys[key].large, key[3])
              for p in POLLUTANTS}
        for key in keys
    }
    if spec.noise_sigma is not None:
        sigma = {p: float(spec.noise_sigma.get(p, 0.0)) for p in POLLUTANTS}
    elif spec.retest_r is not None and keys:
        sigma = {}
        for p in POLLUTANTS:
            variance = float(np.var([true_by_key[k][p] for k in keys]))
            sigma[p] = calibrate_noise(spec.retest_r, variance) if variance > 0 else 0.0
    else:
        sigma = {p: 0.0 for p in POLLUTANTS}

    measurements = []
    clamped = 0
    for key in keys:
        make, model_name, year, fuel = key
        rng = np.random.default_rng((spec.seed, 2, _stable_hash("|".join(map(str, key)))))
        if spec.match_rate < 1.0 and rng.random() >= spec.match_rate:
            continue
        for _ in range(spec.cert_repeats):
            values = {}
            for p in POLLUTANTS:
                v = true_by_key[key][p] + rng.normal(0.0, sigma[p]) if sigma[p] else true_by_key[key][p]
                floor = 0.1 if p == "mpg" else 0.0
                if v < floor:
                    v = floor
                    clamped += 1
                values[p] = float(v)
            measurements.append(EmissionsMeasurement(
                make=make, model=model_name, model_year=year, fuel_type=fuel, **values))
    return measurements, sigma, clamped


def _manifest(spec, truth, sigma, n_keys, n_cert_rows, clamped, region_sign, sparse):
    fleet_means = {"exported": {}, "scrapped": {}, "on_road": {}}
    for p in POLLUTANTS:
        base = spec.base_levels[p]
        fleet_means["scrapped"][p] = base
        fleet_means["exported"][p] = base + spec.fleet_offsets[p]
        fleet_means["on_road"][p] = base + truth.b[p] * (
            spec.on_road_large_share - spec.scrapped_large_share)
    cells = {}
    lo, hi = spec.first_use_years
    for p in POLLUTANTS:
        table = {}
        for bin_idx in range(len(truth.year_edges)):
            for fuel in FUEL_DISTRIBUTION:
                for cls in ("small", "large"):
                    rep_year = truth.year_edges[bin_idx]
                    table[f"{bin_idx}|{fuel}|{cls}"] = truth.value(
                        p, rep_year, cls == "large", fuel)
        cells[p] = table
    n_regions_positive = sum(1 for s in region_sign.values() if s > 0)
    return {
        "seed": spec.seed,
        "vehicles": spec.vehicles,
        "window": [spec.window.start.isoformat(), spec.window.end.isoformat()],
        "fleet_shares": spec.fleet_shares,
        "fleet_true_means": fleet_means,
        "fleet_offsets": spec.fleet_offsets,
        "region_positive_fraction": (
            n_regions_positive / len(region_sign) if region_sign else None),
        "region_signs": {r: s for r, s in sorted(region_sign.items())},
        "sparse_regions": sparse,
        "injected_qc": {
            "dual_disposition": spec.inject_dual,
            "impossible_dates": spec.inject_impossible,
            "over_110_years": spec.inject_overage,
        },
        "noise_sigma": sigma,
        "retest_r": spec.retest_r if spec.noise_sigma is None else None,
        "clamped_values": clamped,
        "n_keys": n_keys,
        "n_cert_rows": n_cert_rows,
        "true_function": {
            "year_edges": truth.year_edges,
            "first_use_years": [lo, hi],
            "cc_boundary": CC_CLASS_BOUNDARY,
            "cells": cells,
        },
    }


def true_value(manifest: dict, pollutant: str, year: int, engine_cc: float, fuel: str) -> float:
    """Evaluate the manifest's true emissions function."""
    fn = manifest["true_function"]
    bin_idx = _year_bin(year, fn["year_edges"])
    cls = "large" if engine_cc >= fn["cc_boundary"] else "small"
    return fn["cells"][pollutant][f"{bin_idx}|{fuel}|{cls}"]


def write_corpus(corpus: SynthCorpus, outdir) -> dict:
    """Write inspections.csv, certifications.csv, and manifest.json."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "inspections": os.path.join(outdir, "inspections.csv"),
        "certifications": os.path.join(outdir, "certifications.csv"),
        "manifest": os.path.join(outdir, "manifest.json"),
    }
    write_inspections(corpus.records, paths["inspections"])
    write_certifications(corpus.measurements, paths["certifications"])
    with open(paths["manifest"], "w", encoding="utf-8") as f:
        json.dump(corpus.manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return paths

"""Domain feature definitions shared by training and imputation.

Trees see exactly three inputs per vehicle: model year, observed engine
capacity in cubic centimetres, and the fuel type code.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from fleetemit.cart import RegressionTree

FUEL_CODES = ("CNG", "DIE", "ELD", "HYB", "LPG", "PET")

POLLUTANTS = ("co2_g_km", "nox_mg_km", "thc_mg_km", "co_mg_km", "mpg")

FEATURE_NAMES = ("model_year", "engine_cc", "fuel_type")
CATEGORICAL_FEATURES = (2,)

YEAR_RANGE = (1900, 2100)


def validate_features(
    model_year: int,
    engine_cc: float,
    fuel_type: str,
    year_range: tuple = YEAR_RANGE,
) -> None:
    """Raise ValueError when a feature triple breaks the domain invariants."""
    if fuel_type not in FUEL_CODES:
        raise ValueError(f"unknown fuel type code: {fuel_type!r}")
    if not engine_cc > 0:
        raise ValueError(f"engine_cc must be positive, got {engine_cc}")
    lo, hi = year_range
    if not lo <= model_year <= hi:
        raise ValueError(f"model_year {model_year} outside plausible range {lo}-{hi}")


def feature_matrix(rows: Iterable[tuple]) -> np.ndarray:
    """Object matrix of (model_year, engine_cc, fuel_type) rows."""
    rows = list(rows)
    out = np.empty((len(rows), 3), dtype=object)
    for i, (year, cc, fuel) in enumerate(rows):
        out[i, 0] = float(year)
        out[i, 1] = float(cc)
        out[i, 2] = str(fuel)
    return out


def new_tree(
    target_kind: str,
    cp: float = 1e-4,
    minsplit: Optional[int] = None,
    minbucket: Optional[int] = None,
    xval: int = 10,
    max_depth: int = 30,
    seed: int = 0,
) -> RegressionTree:
    """Unfitted tree wired for the three domain features."""
    return RegressionTree(
        cp=cp,
        minsplit=minsplit,
        minbucket=minbucket,
        xval=xval,
        max_depth=max_depth,
        seed=seed,
        categorical_features=CATEGORICAL_FEATURES,
        feature_names=FEATURE_NAMES,
        target_kind=target_kind,
    )


def record_model_year(record) -> Optional[int]:
    """Model year of a vehicle, taken from its first-use date."""
    if record.first_use_date is None:
        return None
    return record.first_use_date.year


def record_features(record, year_range: tuple = YEAR_RANGE):
    """(model_year, engine_cc, fuel_type) for a record, or (None, reason).

    Returns (triple, None) on success, (None, reason) when the record
    cannot feed the trees.
    """
    year = record_model_year(record)
    if year is None or record.engine_cc is None or record.fuel_type is None:
        return None, "missing_feature"
    try:
        validate_features(year, record.engine_cc, record.fuel_type, year_range)
    except ValueError:
        return None, "invalid_feature"
    return (year, record.engine_cc, record.fuel_type), None

"""Vehicle fleet emissions imputation and aggregation pipeline."""

from fleetemit.cart import RegressionTree
from fleetemit.features import FUEL_CODES, POLLUTANTS

__version__ = "0.1.0"

__all__ = ["RegressionTree", "FUEL_CODES", "POLLUTANTS", "__version__"]

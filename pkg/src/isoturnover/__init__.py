"""Isotonic subgroup selection on product lattices with data-turnover replication."""

from isoturnover.lattice import GridSpec, UpwardClosedSet, closure_count, leq, minimal_corners
from isoturnover.pvalue import iss_pvalue, log_incomplete_beta
from isoturnover.coding import EncodedDataset, ItemSpec, coarsen, encode_dataset
from isoturnover.dagtest import HypothesisSet, Polyforest, TierConfig, dag_test, dag_test_tiered
from isoturnover.turnover import TurnoverConfig, run_turnover

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "UpwardClosedSet",
    "closure_count",
    "leq",
    "minimal_corners",
    "iss_pvalue",
    "log_incomplete_beta",
    "EncodedDataset",
    "ItemSpec",
    "coarsen",
    "encode_dataset",
    "HypothesisSet",
    "Polyforest",
    "TierConfig",
    "dag_test",
    "dag_test_tiered",
    "TurnoverConfig",
    "run_turnover",
]

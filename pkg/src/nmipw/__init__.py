"""Inverse probability weighting and augmented estimators under nonmonotone MAR missingness."""
from .data_model import (DataError, ObservedDataset, PatternRegistry, VariableSchema, combine_sparse_patterns,
                         infer_patterns, load_dataset, tabulate_patterns)
from .missingness import MissingnessParams, UmleConfig, fit_umle
from .cbe import ChainConfig, PriorSpec, fit_cbe, gelman_rubin
from .ipw import FitReport, LogisticScore, fit_complete_case, fit_full_mle, fit_ipw
from .aipw import bases_from_spec, build_default_bases, one_step_aipw

__version__ = "0.1.0"

__all__ = [
    "DataError", "ObservedDataset", "PatternRegistry", "VariableSchema", "combine_sparse_patterns",
    "infer_patterns", "load_dataset", "tabulate_patterns", "MissingnessParams", "UmleConfig", "fit_umle",
    "ChainConfig", "PriorSpec", "fit_cbe", "gelman_rubin", "FitReport", "LogisticScore",
    "fit_complete_case", "fit_full_mle", "fit_ipw", "bases_from_spec", "build_default_bases", "one_step_aipw",
]

"""Simulation studies: data-generating processes, oracle truths and replicate studies."""

from .dgp import (ConfigError, OracleValue, SimConfig, TruthHazards, dgp_summary, generate_panel,
                  misclassification_rate, oracle_rqal, simulate_paths)

__all__ = ["ConfigError", "OracleValue", "SimConfig", "TruthHazards", "dgp_summary", "generate_panel",
           "misclassification_rate", "oracle_rqal", "simulate_paths"]

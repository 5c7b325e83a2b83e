# Copyright (c) 2026, The MoLA Lab Authors
# SPDX-License-Identifier: Apache-2.0
"""Mixture of low-rank adapters training lab."""

from ._core import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    Error,
    NumericError,
    adapter_parameter_formula,
    delta_m,
    evaluate,
    gen_data,
    omega_embeddings,
    principal_fraction,
    resolve_config,
    svd_spectrum,
    train,
    twd_loss,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "Error",
    "NumericError",
    "adapter_parameter_formula",
    "delta_m",
    "evaluate",
    "gen_data",
    "omega_embeddings",
    "principal_fraction",
    "resolve_config",
    "svd_spectrum",
    "train",
    "twd_loss",
]

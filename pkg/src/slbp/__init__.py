"""Spatial logistic branching on a discrete circle: exact simulation and numerical oracles."""

__version__ = "0.1.0"

from .lattice import (DensityField, ModelParams, OffspringLaw, SiteConfig, TestConfig, binary_law,
                      derive_params, finite_law, geometric_law)
from .sim import Trajectory, ensemble, replica_rng, run_replicas, sample_initial, simulate
from .green import GreenKernel, green_line
from .fkpp import DensityPath, continuum_reference, mckean_estimate, solve
from .vfunc import config_catalog, hierarchy_coeff, product_coeffs, v_estimate, v_exact
from .fluct import backward_solve, bgp_statistic, fluct_field, limit_variance, ou_spde_simulate
from .ratefit import RateFit, fit_rate

__all__ = [
    "DensityField", "ModelParams", "OffspringLaw", "SiteConfig", "TestConfig", "binary_law",
    "derive_params", "finite_law", "geometric_law", "Trajectory", "ensemble", "replica_rng",
    "run_replicas", "sample_initial", "simulate", "GreenKernel", "green_line", "DensityPath",
    "continuum_reference", "mckean_estimate", "solve", "config_catalog", "hierarchy_coeff",
    "product_coeffs", "v_estimate", "v_exact", "backward_solve", "bgp_statistic", "fluct_field",
    "limit_variance", "ou_spde_simulate", "RateFit", "fit_rate",
]

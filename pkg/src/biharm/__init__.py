"""Lattice discretization, diagnostics, and minimization for sphere-valued
maps under the Hessian energy."""

__version__ = "0.1.0"

from .errors import (AllCentersDegenerate, AmbiguousDegree, BiharmError,
                     CenterOnNode, ConfigError, DimensionMismatch,
                     Disconnected, EmptyInterior, FieldFileError,
                     InvalidCenter, NearZeroVector, RegionEscapesDomain,
                     StencilOutOfDomain, UnbalancedDegrees)
from .lattice import (Annulus, Ball, Box, Dumbbell, LatticeDomain,
                      build_domain, geodesic_distance, integrate,
                      shell_integrate)
from .fields import (SphereField, constant_map, dumbbell_boundary_data,
                     dumbbell_competitor, perturb_tangent, radial_map,
                     renormalize, sphere_area, wedge)
from .energy import (EnergyReport, ThresholdConfig, caccioppoli_ratio,
                     dirichlet_energy, el_residual, energy_report,
                     extend_to_sphere, extension_constant, grad4_energy,
                     hessian_energy, project_pi, project_pi_inverse,
                     sigma_monotone, sigma_profile, theta_density)
from .topology import (DetectionThresholds, Singularity, SingularitySet,
                       d_field, detect_singularities, flux_degree,
                       minimal_connection, relative_L, relaxed_L_dual,
                       slice_coverage)
from .optimize import (MinimizeOptions, RunReport, descent_direction,
                       energy_trace_audit, minimize_hessian,
                       minimize_relaxed, q_minimality_audit,
                       surrogate_energy, surrogate_gradient)
from .fieldfile import convert, read_csv, read_field, write_csv, write_field
from .config import (TOLERANCES, default_config, load_config, merged_config,
                     validate_config)

__all__ = [
    "AllCentersDegenerate", "AmbiguousDegree", "BiharmError", "CenterOnNode",
    "ConfigError", "DimensionMismatch", "Disconnected", "EmptyInterior",
    "FieldFileError", "InvalidCenter", "NearZeroVector",
    "RegionEscapesDomain", "StencilOutOfDomain", "UnbalancedDegrees",
    "Annulus", "Ball", "Box", "Dumbbell", "LatticeDomain", "build_domain",
    "geodesic_distance", "integrate", "shell_integrate",
    "SphereField", "constant_map", "dumbbell_boundary_data",
    "dumbbell_competitor", "perturb_tangent", "radial_map", "renormalize",
    "sphere_area", "wedge",
    "EnergyReport", "ThresholdConfig", "caccioppoli_ratio",
    "dirichlet_energy", "el_residual", "energy_report", "extend_to_sphere",
    "extension_constant", "grad4_energy", "hessian_energy", "project_pi",
    "project_pi_inverse", "sigma_monotone", "sigma_profile", "theta_density",
    "DetectionThresholds", "Singularity", "SingularitySet", "d_field",
    "detect_singularities", "flux_degree", "minimal_connection",
    "relative_L", "relaxed_L_dual", "slice_coverage",
    "MinimizeOptions", "RunReport", "descent_direction", "energy_trace_audit",
    "minimize_hessian", "minimize_relaxed", "q_minimality_audit",
    "surrogate_energy", "surrogate_gradient",
    "convert", "read_csv", "read_field", "write_csv", "write_field",
    "TOLERANCES", "default_config", "load_config", "merged_config",
    "validate_config",
]

from .assembly import (AssemblyError, FluxBC, assemble_gradient_smoother, assemble_saddle, assemble_saddle_multi,
                       boundary_flux_matrix,
                       divergence_matrix, flux_moments, gradient_flux_matrix, load_vector, mass_matrix,
                       saddle_spaces, stiffness_matrix, to_coo_text)
from .interpolation import l2_project_dg, lagrange_interpolate, rt_interpolate
from .norms import broken_h1_squared, error_norms, triple_norm
from .quadrature import EDGE_RULE, TRIANGLE_RULE, QuadRule, collapsed_triangle, gauss_interval
from .spaces import (CoefficientField, FeFunction, FunctionSpace, SpaceError, coefficient_qp, function_qp,
                     geometry, quadrature_points, quadrature_weights)

__all__ = [
    "AssemblyError", "FluxBC", "assemble_gradient_smoother", "assemble_saddle", "assemble_saddle_multi", "boundary_flux_matrix",
    "divergence_matrix", "flux_moments", "gradient_flux_matrix", "load_vector", "mass_matrix", "saddle_spaces",
    "stiffness_matrix", "to_coo_text", "l2_project_dg", "lagrange_interpolate", "rt_interpolate",
    "broken_h1_squared", "error_norms", "triple_norm", "EDGE_RULE", "TRIANGLE_RULE", "QuadRule",
    "collapsed_triangle", "gauss_interval", "CoefficientField", "FeFunction", "FunctionSpace", "SpaceError",
    "coefficient_qp", "function_qp", "geometry", "quadrature_points", "quadrature_weights",
]

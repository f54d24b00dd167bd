from kolmogorov.geometry import BoxDomain, Point
from kolmogorov.fields import GridSpec, ScalarField, VFlux
from kolmogorov.coefficients import CoefficientField, make_coefficients
from kolmogorov.obstacle_solver import SolverConfig, SolverError, march, solve_dirichlet
from kolmogorov.expressions import ExpressionSpec

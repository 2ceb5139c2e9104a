"""Poisson-mixture NPMLEs, W1 distances, and pseudo-F permutation tests."""

from .anova import (
    CovariateMatrix,
    DegenerateStatisticError,
    DesignError,
    DistanceMatrix,
    StudyLayout,
    TestResult,
    benjamini_hochberg,
    covariate_permutation_test,
    covariate_pseudo_f,
    distance_matrix,
    gower_center,
    permutation_test,
    pseudo_f,
    pseudo_f_from_gram,
)
from .eigen import sym_eigen
from .likelihood import CountSample, phi, phi_prime, phi_prime_grid
from .measures import (
    DiscreteMeasure,
    DomainError,
    TruncatedPMF,
    point_mass,
    poisson_smooth,
    w1_measures,
    w1_pmfs,
)
from .solvers import Algorithm, FitResult, SolverConfig, fit, support_size_check

__version__ = "0.1.0"

"""Kinetic and Fokker-Planck models of wealth exchange with a power-law kernel."""

from .analytic import (GammaGambling, GeneralizedGamma, InverseGammaDelta,
                       InverseGammaGambling, ModelParams, Potential,
                       ggamma_params, rho_delta, rho_ggamma,
                       validate_initial_condition)
from .exceptions import (AbsoluteContinuityError, AcceptanceBoundError,
                         ConvergenceError, DomainError, EconokinError,
                         InvariantViolation, NegativeDensityError,
                         ParameterError)
from .fokker_planck import (FokkerPlanckSolver, Grid, GridDensity,
                            SolverConfig, discrete_equilibrium, evolve,
                            solve_to_steady)

__version__ = "0.1.0"

"""Mean-field theory and simulation of the supermarket model with MAP arrivals and PH service."""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateStateError, DomainError, FitError, IntegrationError,
                     NumericError, PreconditionError, StabilityError, StructuralError,
                     SupermarketError, ValidationError)
from .fixed_point import (FixedPoint, ResidualReport, Variant, closed_form, decomposition,
                          erlang_compare, expected_sojourn, poisson_ph_first, poisson_ph_second,
                          residuals)
from .models import (MapProcess, ModelParams, PhDistribution, build_map, build_params, build_ph,
                     erlang_ph, exponential_ph, mm_params, example_map, poisson_map)
from .ode import (FractionVector, Trajectory, check_upper_bound, decay_rate, derivative,
                  empty_state, integrate, lyapunov_phi, lyapunov_weights)
from .simulation import SimResult, kurtz_convergence, replicate, simulate

__all__ = [name for name in dir() if not name.startswith("_")]

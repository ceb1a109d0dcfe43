"""Regime-switching linear-quadratic control: Riccati solvers, offsets, moments and turnpike experiments."""

from .errors import (BlowUpError, CertificateError, HorizonTooShortError, LQError, ModelStructureError,
                     NotStabilizableError, NumericalIntegrityError, PaddingError, RegularityError)
from .fitting import FitResult, fit_exponential_rates
from .model import (Generator, LQModel, SignalSet, TimeGrid, ValidationReport, chain_law,
                    generator_apply, sample_regimes, validate_model, xi_profile)
from .moments import (FeedbackLaw, JointMomentTrajectory, MomentTrajectory, closed_loop_moments,
                      evaluate_cost, joint_difference_moments, monte_carlo_simulate)
from .offsets import OffsetSolution, offset_gap, solve_offset_finite, solve_offset_infinite
from .riccati import (ARESolution, DRESolution, dre_are_gap, feedback_gain, riccati_operator, solve_are,
                      solve_dre)
from .stability import (DissipativityCertificate, MeanSquareOperator, build_ms_generator,
                        dissipativity_certificate, find_T0, is_stabilizer, spectral_abscissa)
from .turnpike import (TurnpikeReport, check_ergodic_case, check_integrable_case,
                       run_turnpike_experiment)

__version__ = "0.1.0"

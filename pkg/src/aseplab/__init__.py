"""Event-driven ASEP simulator with coupled-process trackers and exact oracles."""

from .clockwork import ClockEvent, ClockStream, count_events
from .couplings import (CoupledEnsemble, CouplingBugError, FiveProcess,
                        LabeledRegistry, SegmentPerturbation, TruncationError,
                        build_five_process, build_segment_perturbation,
                        count_discrepancies, evolve_coupled, mark_law_snapshot,
                        mark_probability, priority_pi, sample_mu_pair,
                        track_priority_chain, track_walkers)
from .harness import (ExperimentConfig, ScalingFit, fit_exponent,
                      moment_table, run_replicas)
from .lattice import (Configuration, HeightState, Params, ValidationError,
                      Window, char_speed, experiment_window, flux,
                      init_height, int_toward_zero, local_jump,
                      sample_bernoulli)
from .observables import (current, diffusivity, mean_current_formula,
                          off_characteristic_variance, sigma2_formula,
                          two_point_estimate, variance_identity_estimators)
from .oracle import (blocking_detailed_balance, change_of_measure_identity,
                     ring_generator, stationarity_check,
                     transient_distribution)

__version__ = "0.1.0"

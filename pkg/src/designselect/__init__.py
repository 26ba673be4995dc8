"""Select design algorithm configurations whose design labels meet a success
criterion, with family-wise error control."""

from .baselines import (IsotonicCalibrator, WeightedResidualSet, calibrated_expectation,
                        calibrated_select, conformal_select, fit_calibrator,
                        split_conformal_lb)
from .harness import ExperimentConfig, ExperimentResult, run_experiment, summarize, sweep_tau
from .inference import (BoundConfig, GSample, PPEstimate, SuccessCriterion,
                        asymptotic_p_value, effective_sample_size, finite_sample_p_value,
                        labeled_only_estimate, pp_estimate, pp_lower_bound_curve,
                        pp_mean_lower_bound, prediction_only_p_value,
                        self_normalized_p_value, wsr_mean_lower_bound)
from .ratios import (ClassifierRatio, ExactRatio, MdreModel, ProductCategorical,
                     SmoothedRatio, UnnormalizedRatio, exact_ratio, fit_mdre, fit_smoothed,
                     max_ratio, mdre_ratio)
from .selection import (Backend, ConfigResult, ConfigurationSpec, Menu, SelectionReport,
                        apply_g, select)
from .sim import (InstanceSpec, LabelOracle, SequenceSpace, brute_force_theta,
                  build_instance, fit_ridge, make_labeled_dist, sample_designs,
                  sample_labeled, tilt)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

"""Cooperative abnormality detection and localization by mobile sensors
drifting in a laminar flow: closed-form error probabilities, a Monte-Carlo
simulator that cross-checks them, and a sweep/CSV front end."""

from .core import (ConfigError, ErrorEstimate, FlowCheck, SystemConfig, TailMode, count_tail,
                   fc_hit_vector, marker_hit_prob, reference_config, sensor_hit_matrix,
                   slot_count, validate_flow_regime)
from .detection import (EnumerationPolicy, SensorType, detection_error_prob, false_alarm_prob,
                        miss_detection_prob, optimize_thresholds, slot_probs_h0, slot_probs_h1)
from .localization import (ThresholdVector, argmax_decide_type_b, localization_error_imperfect_type_a,
                           localization_error_perfect, localization_error_type_b, ml_decide_type_b,
                           optimal_thresholds_type_a, storage_to_slot, argmax_matches_ml)
from .simulator import Scenario, estimate_error, ground_truth_decision_check, run_trial, simulate
from .experiments import ExperimentSpec, Study, list_presets, load_config, run_experiment

__version__ = "0.1.0"

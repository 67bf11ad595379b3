"""Bandit control of linear dynamical systems.

Ellipsoidal bandit convex optimization with memory (EBCO-M), the bandit
perturbation controller built on it (EBPC), least-squares identification of
the Markov operator, comparison controllers and an experiment harness.
"""
from ._kernels import USE_JIT
from .baselines import (BpcConfig, LqrGain, best_drc_hindsight, best_drc_hindsight_l1op,
                        dare_solve, lqr_control, run_bpc, run_lqr, run_zero)
from .bco import Ebco, EbcoConfig, rftl_d_full_info, rftl_d_update
from .control import Ebpc, EbpcConfig, make_ebpc_config, run_ebpc, run_ebpc_unknown
from .geometry import ConstraintSet
from .harness import (ExperimentConfig, RegretReport, default_config_dict, emit_csv,
                      load_config, moving_average, parse_config, run_experiment)
from .lds import (CostSpec, LdsParams, MarkovOperator, NoiseParams, NoiseTrace, double_integrator,
                  make_noise, markov_operator)
from .policy import DrcParams
from .results import TrialResult
from .sysid import EstimationReport, run_estimation_phase, sysest_ls

__version__ = "0.1.0"

__all__ = [
    "USE_JIT", "BpcConfig", "LqrGain", "best_drc_hindsight", "best_drc_hindsight_l1op",
    "dare_solve", "lqr_control", "run_bpc", "run_lqr", "run_zero", "Ebco", "EbcoConfig",
    "rftl_d_full_info", "rftl_d_update", "Ebpc", "EbpcConfig", "make_ebpc_config", "run_ebpc",
    "run_ebpc_unknown", "ConstraintSet", "ExperimentConfig", "RegretReport",
    "default_config_dict", "emit_csv", "load_config", "moving_average", "parse_config",
    "run_experiment", "CostSpec", "LdsParams", "MarkovOperator", "NoiseParams", "NoiseTrace",
    "double_integrator", "make_noise", "markov_operator", "DrcParams", "TrialResult",
    "EstimationReport", "run_estimation_phase", "sysest_ls",
]

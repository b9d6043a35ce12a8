"""Simulation and verification laboratory for mean-field elastic collisions.

The package simulates the stochastic N-particle collision process, measures
its distance to limit dynamics in a weighted transport metric, runs the
signed branching estimator that represents solutions of the limit equation,
and packages repeatable experiments behind a command-line interface.
"""

from .core import (EmpiricalMeasure, ParticleState, TestFunction,
                   builtin_test_function, collide, metric_family_member,
                   shell_project)
from .kernels import (CollisionKernel, PovznerReport, expansion_constant,
                      estimate_kappa, find_povzner_beta, hard_sphere,
                      kernel_by_name, povzner_gap, povzner_lhs)
from .simulator import (KacEvent, KacPath, MartingaleLedger, load_path_jsonl,
                        martingale_ledger, q_pairing, run, spawn_seeds,
                        state_at)
from .transport import (GroundCost, TransportPlan, flat_capped, phi_transform,
                        w_distance, w1_capped, w_subsampled)
from .branching import (CapExceeded, CouplingStats, EfEstimate, Environment,
                        RepresentationReport, SignedPopulation, branch_run,
                        coupled_environment, coupled_initial, dcl_envelope,
                        estimate_Ef, estimate_Ef_points, ghu_bound, jpe_bound,
                        verify_representation)
from .sampling import (RateFit, SourceLaw, check_in_S, gaussian_law,
                       heavy_tail_law, law_by_name, quasi_reference,
                       rate_experiment, rescale, sample_empirical,
                       theoretical_beta, two_point_law)
from .signed_measure import (FiniteSignedMeasure, MeasureFlow, evolve,
                             tv_identity_check)
from .experiments import (ExperimentConfig, boltzmann_proxy,
                          consistency_experiment, moment_experiment,
                          run_experiment, sampling_rate_experiment, selftest,
                          write_outputs)

__version__ = "0.1.0"

__all__ = [
    "EmpiricalMeasure", "ParticleState", "TestFunction",
    "builtin_test_function", "collide", "metric_family_member",
    "shell_project",
    "CollisionKernel", "PovznerReport", "expansion_constant",
    "estimate_kappa", "find_povzner_beta", "hard_sphere", "kernel_by_name",
    "povzner_gap", "povzner_lhs",
    "KacEvent", "KacPath", "MartingaleLedger", "load_path_jsonl",
    "martingale_ledger", "q_pairing", "run", "spawn_seeds", "state_at",
    "GroundCost", "TransportPlan", "flat_capped", "phi_transform",
    "w_distance", "w1_capped", "w_subsampled",
    "CapExceeded", "CouplingStats", "EfEstimate", "Environment",
    "RepresentationReport", "SignedPopulation", "branch_run",
    "coupled_environment", "coupled_initial", "dcl_envelope", "estimate_Ef",
    "estimate_Ef_points", "ghu_bound", "jpe_bound", "verify_representation",
    "RateFit", "SourceLaw", "check_in_S", "gaussian_law", "heavy_tail_law",
    "law_by_name", "quasi_reference", "rate_experiment", "rescale",
    "sample_empirical", "theoretical_beta", "two_point_law",
    "FiniteSignedMeasure", "MeasureFlow", "evolve", "tv_identity_check",
    "ExperimentConfig", "boltzmann_proxy", "consistency_experiment",
    "moment_experiment", "run_experiment", "sampling_rate_experiment",
    "selftest", "write_outputs",
]

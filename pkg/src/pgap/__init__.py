"""Zeroth-order optimization with projected gradient-aligned perturbations.

The package provides dense linear-algebra helpers, deterministic seed-
addressable random streams, desk-scale training objectives, the two-point
gradient estimator with seed-replay perturbations, hyperplane alignment in a
lazily refreshed low-rank subspace, the training loops, and a Monte-Carlo
lab that verifies the method's variance, moment, bias, and subspace-recovery
laws.
"""

from .align import (AlignedPerturbation, align_fullspace_matrix,
                    align_fullspace_vector, consistency_check_lowdim_vs_fullspace,
                    lift, make_aligned, project_lowdim)
from .errors import (CheckpointError, ConfigError, DimensionError, InternalError,
                     NumericError, ParseError, PgapError, StateError)
from .estimator import (FullGaussian, PerturbPlan, SubspaceAligned, ZoStepRecord,
                        apply_signed_perturbation, averaged_estimate, materialize,
                        plan_for_step, plan_full_gaussian, two_point_coeff)
from .linalg import SvdTriple, frob_inner, frob_norm, kron_vec_check, truncated_svd
from .objectives import (Batch, BatchStream, CountingOracle, CsvSchema,
                         LeastSquaresOracle, LogisticOracle, LossOracle,
                         LoraOracle, Param, ParamKind, ParamSet, QuadraticOracle,
                         RankStructuredQuadratic, TinyMlpOracle, analytic_gradient,
                         eval_loss, load_csv, lora_wrap, make_lowrank_logistic,
                         make_synthetic)
from .optimizer import (OptimizerConfig, RunError, RunLog, RunState, ScheduleKind,
                        StepRecord, checkpoint_load, checkpoint_save, mezo_step,
                        pgap_step, replay_step, run, schedule_value)
from .randsrc import (GaussStream, Seed, derive_substream, gauss_matrix,
                      gauss_vector, rademacher_sign)
from .subspace import (RefreshSchedule, SubspaceBasis, lower_dim_generate,
                       probe_plan, should_refresh, subspace_capture)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

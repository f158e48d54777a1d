"""Sparse nonnegative tensor factorization for single and coupled models.

Point estimates by multiplicative EM (KL cost) or MAP-EM, and full gamma
posteriors by variational Bayes, all computed on the observed entries only.
"""

__version__ = "0.1.0"

from .contraction import compile_plan, delta, dense_oracle_delta, dense_oracle_reconstruct, reconstruct_observed
from .errors import DataFormatError, ModelSyntaxError, NumericError, TensorVBError, ValidationError
from .evaluation import SplitSpec, auc, link_prediction_eval, make_split, rmse, summary_row, write_report
from .io import read_coo, read_factor, write_coo, write_factor
from .model import (FactorSpec, ModelSpec, ObservationSpec, PriorSpec, cp_model, load_model_spec,
                    parse_model_spec, serialize_model_spec, tucker_model, uclaf_model)
from .solvers import (FitResult, SolverConfig, Termination, elbo, em_step, fit, kl_objective, map_em_step,
                      predict, sweep, vb_step)
from .special import digamma
from .synth import SynthSpec, generate_coupled_data, generate_cp_data, sample_heldout
from .tensor import Factor, IndexSpace, SparseTensor, from_dense, init_factor, to_dense

__all__ = [
    "__version__", "compile_plan", "delta", "dense_oracle_delta", "dense_oracle_reconstruct",
    "reconstruct_observed", "DataFormatError", "ModelSyntaxError", "NumericError", "TensorVBError",
    "ValidationError", "SplitSpec", "auc", "link_prediction_eval", "make_split", "rmse",
    "summary_row", "write_report", "read_coo", "read_factor", "write_coo", "write_factor",
    "FactorSpec", "ModelSpec", "ObservationSpec", "PriorSpec", "cp_model", "load_model_spec",
    "parse_model_spec", "serialize_model_spec", "tucker_model", "uclaf_model", "FitResult",
    "SolverConfig", "Termination", "elbo", "em_step", "fit", "kl_objective", "map_em_step",
    "predict", "sweep", "vb_step", "digamma", "SynthSpec", "generate_coupled_data",
    "generate_cp_data", "sample_heldout", "Factor", "IndexSpace", "SparseTensor", "from_dense",
    "init_factor", "to_dense",
]

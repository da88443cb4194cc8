"""Small float64 autodiff kernel: tensors, layers, samplers, Adam, checkpoints."""
from premig.numerics.tensor import ContractViolation, Tensor, concat, maximum, minimum, stack, take_along, where
from premig.numerics.nn import (
    DenseLayerParams,
    LstmCellParams,
    dense_forward,
    init_dense,
    init_lstm,
    lstm_cell,
    mlp_forward,
    zero_dense,
    zero_lstm,
)
from premig.numerics.distributions import (
    beta_entropy,
    beta_log_density,
    beta_log_prob,
    bounded_sample,
    categorical_entropy,
    categorical_log_prob,
    categorical_sample,
    log_softmax,
    masked_logits,
)
from premig.numerics.optim import OptimizerState, optimizer_step
from premig.numerics.gradcheck import check_gradients, max_relative_error, numeric_grad
from premig.numerics.checkpoint import load_params, save_params

__all__ = [
    "ContractViolation", "Tensor", "concat", "maximum", "minimum", "stack", "take_along", "where",
    "DenseLayerParams", "LstmCellParams", "dense_forward", "init_dense", "init_lstm", "lstm_cell",
    "mlp_forward", "zero_dense", "zero_lstm",
    "beta_entropy", "beta_log_density", "beta_log_prob", "bounded_sample", "categorical_entropy",
    "categorical_log_prob", "categorical_sample", "log_softmax", "masked_logits",
    "OptimizerState", "optimizer_step",
    "check_gradients", "max_relative_error", "numeric_grad",
    "load_params", "save_params",
]

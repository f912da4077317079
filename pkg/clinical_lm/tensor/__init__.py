"""Dense tensors, reverse-mode autodiff, losses and the Adam optimizer."""
from clinical_lm.tensor.autodiff import (  # noqa: F401
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    current_tape,
    default_dtype,
    div,
    dropout,
    embedding_lookup,
    exp,
    get_default_dtype,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    set_default_dtype,
    slice_,
    sub,
    sum_,
    tanh,
    transpose,
)
from clinical_lm.tensor.functional import (  # noqa: F401
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    mse,
    softmax,
    softmax_cross_entropy,
)
from clinical_lm.tensor.optim import (  # noqa: F401
    Adam,
    AdamState,
    WarmupConstantSchedule,
    adam_step,
    init_adam_state,
)

from .gradcheck import NonDeterministicError, finite_difference_check, numerical_gradient
from .ops import (
    IGNORE_INDEX,
    LAYER_NORM_EPS,
    add,
    concat,
    cross_entropy,
    dropout,
    embedding,
    l1_norm,
    layer_norm,
    matmul,
    mul,
    mul_const,
    primitive_forward,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    sum_,
    transpose_last,
)
from .tensor import (
    GradGraph,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    current_graph,
    get_default_dtype,
    no_grad,
    precision,
    record_graph,
    set_default_dtype,
    strict_checks,
)

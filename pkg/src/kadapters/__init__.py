"""Kernel-wise low-rank adapters for multi-head attention.

The package provides: a minimal reverse-mode autodiff core over dense float64
matrices (``autodiff``), attention with its kernel-estimator view
(``attention``), five adapter schemes with exact parameter accounting
(``adapters``), preset budget plans (``planner``), a toy training harness
(``harness``), verification oracles (``analysis``), bit-exact checkpoint I/O
(``checkpoint``) and a CLI (``cli``).

Hot numeric kernels run through ``backend`` (numba-jitted by default, pure
numpy via KADAPTERS_BACKEND=numpy).
"""

__version__ = "0.1.0"

from .adapters import (
    AdapterScheme,
    AdapterState,
    SchemeKind,
    adapted_weight,
    compose_delta,
    count_params,
    delta_forward,
    factored_forward,
    init_adapter,
    lite_fast_forward,
    named_trainable_params,
    trainable_params,
)
from .attention import (
    GPT2_SMALL,
    AttentionWeights,
    KernelEstimatorView,
    ModelDims,
    attention_head,
    attention_layer,
    kernel_view,
    project_qkv,
    rewritten_attention,
)
from .autodiff import Matrix, Node, backward, finite_diff_grad, reset_grads
from .harness import (
    AttentionStack,
    ToyTask,
    TrainConfig,
    TrainLog,
    compare_schemes,
    init_plan_adapters,
    make_task,
    toy_dims,
    train,
)
from .planner import BudgetPlan, BudgetReport, builtin_plan, custom_plan, registered_plan_names, report

__all__ = [
    "__version__",
    "AdapterScheme", "AdapterState", "SchemeKind", "adapted_weight", "compose_delta",
    "count_params", "delta_forward", "factored_forward", "init_adapter",
    "lite_fast_forward", "named_trainable_params", "trainable_params",
    "GPT2_SMALL", "AttentionWeights", "KernelEstimatorView", "ModelDims",
    "attention_head", "attention_layer", "kernel_view", "project_qkv",
    "rewritten_attention",
    "Matrix", "Node", "backward", "finite_diff_grad", "reset_grads",
    "AttentionStack", "ToyTask", "TrainConfig", "TrainLog", "compare_schemes",
    "init_plan_adapters", "make_task", "toy_dims", "train",
    "BudgetPlan", "BudgetReport", "builtin_plan", "custom_plan",
    "registered_plan_names", "report",
]

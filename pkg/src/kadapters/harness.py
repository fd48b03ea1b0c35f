"""Toy-scale adaptation tasks: frozen base stack, perturbed teacher, AdamW.

The task replaces large-corpus fine-tuning with a regression that has exact
ground truth: a randomly initialized stack of attention sub-layers (with
residual connections) is the frozen base; the teacher is the same stack with
a structured perturbation added to the designated target matrices; training
fits adapter factors to the teacher's outputs under mean squared error.

Teacher kinds:

* ``head-specific-lowrank``: each head block h gets an independent rank-r
  update drawn inside the span of the frozen key block W_k_h. Head column
  spaces stay distinct, and every scheme family -- including the lite ones,
  whose reach is exactly span(W_k_h) -- contains the perturbation when its
  per-head rank is at least r (LoRA needs shared rank >= n_heads * r).
* ``shared-lowrank``: one global rank-r update, the regime LoRA is built for.
* ``dense``: an unstructured full-rank perturbation no low-rank family
  contains exactly.

Optimization is AdamW on the adapter factors only, with a linear warmup to
the peak rate and a linear decay to zero. Base weights are digest-checked
before and after so a frozen-base violation cannot pass silently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .adapters import (
    AdapterState,
    compose_delta,
    delta_forward,
    init_adapter,
    named_trainable_params,
)
from .attention import AttentionWeights, ModelDims, TARGETS, attention_head, split_heads
from .autodiff import (
    Node,
    add,
    backward,
    concat_cols,
    constant,
    matmul,
    mse,
    ones,
    reset_grads,
    scale,
)
from .errors import ConfigError, DivergedError
from .planner import BudgetPlan

TEACHER_KINDS = ("head-specific-lowrank", "shared-lowrank", "dense")

LayerAdapters = dict[str, AdapterState]


def attention_stack_param_count(n_layers: int, model_dim: int) -> int:
    # 4 projection matrices + 4 bias rows per layer
    return n_layers * (4 * model_dim * model_dim + 4 * model_dim)


def toy_dims(n_layers: int = 2, n_heads: int = 4, head_dim: int = 8) -> ModelDims:
    d = n_heads * head_dim
    return ModelDims(
        n_layers=n_layers, n_heads=n_heads, head_dim=head_dim,
        base_param_total=attention_stack_param_count(n_layers, d),
    )


@dataclass(frozen=True)
class ToyTask:
    dims: ModelDims = field(default_factory=toy_dims)
    seq_len: int = 16
    base_seed: int = 0
    teacher_kind: str = "head-specific-lowrank"
    teacher_rank: int = 1
    teacher_scale: float = 0.5
    dataset_size: int = 8
    targets: tuple[str, ...] = ("v",)

    def __post_init__(self):
        if self.teacher_kind not in TEACHER_KINDS:
            raise ConfigError(
                f"teacher_kind must be one of {TEACHER_KINDS}, got {self.teacher_kind!r}"
            )
        if self.teacher_rank < 1 or self.teacher_rank > self.dims.head_dim:
            raise ConfigError(
                f"teacher_rank must be in [1, p={self.dims.head_dim}], got {self.teacher_rank}"
            )
        if self.teacher_scale < 0:
            raise ConfigError(f"teacher_scale must be nonnegative, got {self.teacher_scale}")
        if self.seq_len < 1 or self.dataset_size < 1:
            raise ConfigError("seq_len and dataset_size must be positive")
        bad = [t for t in self.targets if t not in TARGETS]
        if bad or not self.targets:
            raise ConfigError(f"targets must be non-empty and within {TARGETS}, got {self.targets}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 4
    warmup_steps: int = 500
    total_steps: int = 2000
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        # learning_rate and weight_decay may be zero (null-optimizer runs).
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be nonnegative")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps must lie in [0, total_steps], got "
                f"{self.warmup_steps} vs {self.total_steps}"
            )
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam betas must be in (0,1) and eps positive")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak rate, then linear decay to zero.

    Steps are 1-based; the rate equals learning_rate exactly at
    step == warmup_steps and zero exactly at step == total_steps.
    """
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.total_steps - step) / span


class AttentionStack:
    """n_layers attention sub-layers with residual connections.

    The stack owns frozen weights; adapters are passed per forward call so
    one stack serves base, teacher-free and adapted evaluations alike.
    """

    def __init__(self, dims: ModelDims, layers: list[AttentionWeights]):
        if len(layers) != dims.n_layers:
            raise ConfigError(f"expected {dims.n_layers} layers, got {len(layers)}")
        self.dims = dims
        self.layers = layers

    @classmethod
    def random(cls, dims: ModelDims, seed) -> "AttentionStack":
        layers = [
            AttentionWeights.random(dims, seed=[seed, layer_idx])
            for layer_idx in range(dims.n_layers)
        ]
        return cls(dims, layers)

    def clone_with_deltas(self, deltas: list[dict[str, np.ndarray]]) -> "AttentionStack":
        """New stack whose target matrices are shifted by the given deltas."""
        layers = []
        for w, layer_deltas in zip(self.layers, deltas):
            arrays = {k: v.copy() for k, v in w.arrays().items()}
            for target, delta in layer_deltas.items():
                arrays[f"w_{target}"] = arrays[f"w_{target}"] + delta
            layers.append(AttentionWeights.from_arrays(arrays))
        return AttentionStack(self.dims, layers)

    def forward_node(self, x, adapters: list[LayerAdapters] | None = None) -> Node:
        dims = self.dims
        h = constant(x) if not isinstance(x, Node) else x
        n = h.value.shape[0]
        one = ones(n, 1)
        for layer_idx, w in enumerate(self.layers):
            layer_adapters = adapters[layer_idx] if adapters else {}
            xwk = matmul(h, w.w_k)

            def projected(target: str, base_product: Node) -> Node:
                out = add(base_product, matmul(one, w.bias_for(target)))
                state = layer_adapters.get(target)
                if state is not None:
                    out = add(out, delta_forward(h, state, w, dims, key_product=xwk))
                    if state.bias_delta is not None:
                        out = add(out, matmul(one, state.bias_delta))
                return out

            q = projected("q", matmul(h, w.w_q))
            k = projected("k", xwk)
            v = projected("v", matmul(h, w.w_v))
            heads = [
                attention_head(qh, kh, vh, dims.head_dim)
                for qh, kh, vh in zip(split_heads(q, dims), split_heads(k, dims),
                                      split_heads(v, dims))
            ]
            concat = concat_cols(heads)
            out = add(matmul(concat, w.w_o), matmul(one, w.b_o))
            state_o = layer_adapters.get("o")
            if state_o is not None:
                out = add(out, delta_forward(concat, state_o, w, dims))
                if state_o.bias_delta is not None:
                    out = add(out, matmul(one, state_o.bias_delta))
            h = add(h, out)
        return h

    def forward(self, x, adapters: list[LayerAdapters] | None = None) -> np.ndarray:
        return self.forward_node(x, adapters).value

    def weight_digest(self) -> str:
        digest = hashlib.sha256()
        for layer_idx, w in enumerate(self.layers):
            for name, value in sorted(w.arrays().items()):
                digest.update(f"{layer_idx}:{name}:{value.shape}".encode())
                digest.update(value.tobytes())
        return digest.hexdigest()


def _normalized(m: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(m)
    return m if norm == 0 else m / norm


def _teacher_delta(task: ToyTask, weights: AttentionWeights, target: str,
                   rng: np.random.Generator) -> np.ndarray:
    dims = task.dims
    d, p = dims.model_dim, dims.head_dim
    if task.teacher_kind == "shared-lowrank":
        delta = _normalized(
            rng.standard_normal((d, task.teacher_rank))
            @ rng.standard_normal((task.teacher_rank, d))
        )
    elif task.teacher_kind == "dense":
        delta = _normalized(rng.standard_normal((d, d)))
    else:  # head-specific-lowrank
        blocks = []
        w_k = weights.w_k.value
        for h in range(dims.n_heads):
            lo, hi = dims.head_slice(h)
            inner = rng.standard_normal((p, task.teacher_rank))
            outer = rng.standard_normal((task.teacher_rank, p))
            block = _normalized(w_k[:, lo:hi] @ inner @ outer)
            blocks.append(block / np.sqrt(dims.n_heads))
        delta = np.hstack(blocks)
    delta = task.teacher_scale * delta
    if target == "o":
        delta = delta.T.copy()
    return delta


def make_task(task: ToyTask) -> tuple[AttentionStack, AttentionStack, list[tuple[np.ndarray, np.ndarray]]]:
    """Instantiate (base, teacher, dataset) deterministically from the task seeds."""
    base = AttentionStack.random(task.dims, task.base_seed)
    deltas: list[dict[str, np.ndarray]] = []
    for layer_idx, w in enumerate(base.layers):
        layer_deltas = {}
        for t_idx, target in enumerate(task.targets):
            rng = np.random.default_rng([task.base_seed, 7, layer_idx, t_idx])
            layer_deltas[target] = _teacher_delta(task, w, target, rng)
        deltas.append(layer_deltas)
    teacher = base.clone_with_deltas(deltas)
    d = task.dims.model_dim
    dataset = []
    for i in range(task.dataset_size):
        rng = np.random.default_rng([task.base_seed, 11, i])
        x = rng.standard_normal((task.seq_len, d))
        dataset.append((x, teacher.forward(x)))
    return base, teacher, dataset


def init_plan_adapters(plan: BudgetPlan, seed: int) -> list[LayerAdapters]:
    """One AdapterState per (layer, adapted target), seeds derived per slot."""
    out: list[LayerAdapters] = []
    for layer_idx in range(plan.dims.n_layers):
        layer: LayerAdapters = {}
        for t_idx, target in enumerate(TARGETS):
            scheme = plan.scheme_for(target)
            if scheme is None:
                continue
            layer[target] = init_adapter(scheme, target, plan.dims,
                                         seed=[seed, layer_idx, t_idx])
        out.append(layer)
    return out


def named_plan_params(adapters: list[LayerAdapters]) -> list[tuple[str, Node]]:
    out = []
    for layer_idx, layer in enumerate(adapters):
        for target in TARGETS:
            state = layer.get(target)
            if state is None:
                continue
            for name, node in named_trainable_params(state):
                out.append((f"layer{layer_idx}.{target}.{name}", node))
    return out


@dataclass
class TrainLog:
    losses: list[float]
    lrs: list[float]
    param_drift: list[float]
    final_loss: float
    base_digest_before: str
    base_digest_after: str
    trainable_param_count: int

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "lrs": self.lrs,
            "param_drift": self.param_drift,
            "final_loss": self.final_loss,
            "base_digest_before": self.base_digest_before,
            "base_digest_after": self.base_digest_after,
            "trainable_param_count": self.trainable_param_count,
            "steps": len(self.losses),
        }

    def loss_csv_lines(self) -> list[str]:
        lines = ["step,loss,lr"]
        lines.extend(
            f"{step},{loss!r},{lr!r}"
            for step, (loss, lr) in enumerate(zip(self.losses, self.lrs), start=1)
        )
        return lines


def batch_loss(stack: AttentionStack, adapters: list[LayerAdapters] | None,
               batch: list[tuple[np.ndarray, np.ndarray]]) -> Node:
    losses = [mse(stack.forward_node(x, adapters), constant(y)) for x, y in batch]
    total = losses[0]
    for extra in losses[1:]:
        total = add(total, extra)
    return scale(total, 1.0 / len(losses))


def train(stack: AttentionStack, adapters: list[LayerAdapters],
          dataset: list[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig) -> TrainLog:
    """AdamW over the adapter factors only; the base stack stays frozen."""
    named = named_plan_params(adapters)
    params = [node for _, node in named]
    digest_before = stack.weight_digest()
    initial_values = [p.value.copy() for p in params]
    m_state = [np.zeros_like(p.value) for p in params]
    v_state = [np.zeros_like(p.value) for p in params]

    losses: list[float] = []
    lrs: list[float] = []
    drift: list[float] = []
    for step in range(1, cfg.total_steps + 1):
        start = ((step - 1) * cfg.batch_size) % len(dataset)
        batch = [dataset[(start + j) % len(dataset)] for j in range(cfg.batch_size)]
        loss = batch_loss(stack, adapters, batch)
        loss_value = float(loss.value[0, 0])
        if not np.isfinite(loss_value):
            raise DivergedError(step, loss_value)
        lr = lr_at(cfg, step)
        losses.append(loss_value)
        lrs.append(lr)
        backward(loss)
        for i, p in enumerate(params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.value)
            p.value = backend.adamw_update(
                p.value, grad, m_state[i], v_state[i], step, lr,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay,
            )
        reset_grads(params)
        drift.append(float(np.sqrt(sum(
            float(((p.value - v0) ** 2).sum()) for p, v0 in zip(params, initial_values)
        ))))
    return TrainLog(
        losses=losses,
        lrs=lrs,
        param_drift=drift,
        final_loss=losses[-1],
        base_digest_before=digest_before,
        base_digest_after=stack.weight_digest(),
        trainable_param_count=sum(p.value.size for p in params),
    )


@dataclass
class ComparisonRow:
    plan_name: str
    params_total: int
    percent_of_base: float
    initial_loss: float
    final_loss: float
    delta_ranks: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "plan_name": self.plan_name,
            "params_total": self.params_total,
            "percent_of_base": self.percent_of_base,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "delta_ranks": dict(self.delta_ranks),
        }


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]

    def to_dict(self) -> dict:
        return {"rows": [row.to_dict() for row in self.rows]}

    def csv_lines(self) -> list[str]:
        lines = ["plan,params_total,percent_of_base,initial_loss,final_loss,delta_ranks"]
        for row in self.rows:
            ranks = "|".join(f"{t}={r}" for t, r in sorted(row.delta_ranks.items()))
            lines.append(
                f"{row.plan_name},{row.params_total},{row.percent_of_base!r},"
                f"{row.initial_loss!r},{row.final_loss!r},{ranks}"
            )
        return lines


def compare_schemes(task: ToyTask, plans: list[BudgetPlan], cfg: TrainConfig) -> ComparisonResult:
    """Train every plan on the same task instance and tabulate the outcomes."""
    from .analysis import numerical_rank
    from .planner import report as plan_report

    stack, _, dataset = make_task(task)
    rows: list[ComparisonRow] = []
    for plan in plans:
        adapters = init_plan_adapters(plan, seed=cfg.seed)
        log = train(stack, adapters, dataset, cfg)
        ranks: dict[str, int] = {}
        for target in plan.adapted_targets():
            delta = compose_delta(adapters[0][target], stack.layers[0], plan.dims)
            ranks[target] = numerical_rank(delta.value)
        budget = plan_report(plan)
        rows.append(ComparisonRow(
            plan_name=plan.name,
            params_total=budget.params_total,
            percent_of_base=budget.percent_of_base,
            initial_loss=log.losses[0],
            final_loss=log.final_loss,
            delta_ranks=ranks,
        ))
    return ComparisonResult(rows=rows)

"""The five weight-update schemes for adapting attention projections.

Every scheme produces a d x d update DW for one target matrix; the head-h
column block DW[:, h*p:(h+1)*p] is assembled as:

    lora             B A_h                 (B shared across heads)
    kernel-wise      B_h A_h               (head-specific basis)
    kernel-wise-lite W_k_h Bk_h A_h        (frozen key block as basis)
    kernel-mix       B A'_h + B_h A_h      (shared stacked with head-specific)
    kernel-mix-lite  B A'_h + W_k_h Bk_h A_h

with B: d x r_shared, A'_h: r_shared x p, B_h: d x r_head, Bk_h: p x r_head,
A_h: r_head x p. For the output matrix W_o the head blocks are rows, so the
scheme is applied in the transpose orientation and the result transposed; the
frozen basis of the lite variants stays W_k_h.

Initialization zeroes every B-side factor and draws A-side factors from
N(0, 1/rank), so DW = 0 and an adapted model starts bit-identical to its
frozen base. Base weights are never mutated or given gradients; the trainable
surface is exactly ``trainable_params``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import AttentionWeights, ModelDims, TARGETS
from .autodiff import (
    Matrix,
    Node,
    add,
    as_node,
    concat_cols,
    leaf,
    matmul,
    slice_cols,
    transpose,
)
from .errors import ConfigError, ContractError, ShapeError


class SchemeKind(str, Enum):
    LORA = "lora"
    KERNEL_WISE = "kernel-wise"
    KERNEL_WISE_LITE = "kernel-wise-lite"
    KERNEL_MIX = "kernel-mix"
    KERNEL_MIX_LITE = "kernel-mix-lite"


_SHARED_KINDS = {SchemeKind.LORA, SchemeKind.KERNEL_MIX, SchemeKind.KERNEL_MIX_LITE}
_HEAD_KINDS = {
    SchemeKind.KERNEL_WISE,
    SchemeKind.KERNEL_WISE_LITE,
    SchemeKind.KERNEL_MIX,
    SchemeKind.KERNEL_MIX_LITE,
}
_LITE_KINDS = {SchemeKind.KERNEL_WISE_LITE, SchemeKind.KERNEL_MIX_LITE}


@dataclass(frozen=True)
class AdapterScheme:
    """One adaptation method with its rank(s) and bias choice.

    rank_shared is the rank of the shared (LoRA-style) factor pair;
    rank_head the rank of the per-head factors. Exactly the ranks a kind
    uses must be positive.
    """

    kind: SchemeKind
    rank_shared: int = 0
    rank_head: int = 0
    include_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(self.kind))
        if self.rank_shared < 0 or self.rank_head < 0:
            raise ConfigError(f"ranks must be nonnegative, got {self}")
        wants_shared = self.kind in _SHARED_KINDS
        wants_head = self.kind in _HEAD_KINDS
        if wants_shared != (self.rank_shared >= 1):
            raise ConfigError(
                f"{self.kind.value}: rank_shared must be {'>= 1' if wants_shared else '0'},"
                f" got {self.rank_shared}"
            )
        if wants_head != (self.rank_head >= 1):
            raise ConfigError(
                f"{self.kind.value}: rank_head must be {'>= 1' if wants_head else '0'},"
                f" got {self.rank_head}"
            )

    @property
    def uses_lite_basis(self) -> bool:
        return self.kind in _LITE_KINDS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "rank_shared": self.rank_shared,
            "rank_head": self.rank_head,
            "include_bias": self.include_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterScheme":
        return cls(
            kind=SchemeKind(d["kind"]),
            rank_shared=int(d.get("rank_shared", 0)),
            rank_head=int(d.get("rank_head", 0)),
            include_bias=bool(d.get("include_bias", True)),
        )


@dataclass
class AdapterState:
    """Trainable factors of one scheme applied to one target matrix.

    Factor lists are ordered by head. ``init_seed`` records the seed lineage
    for checkpoints; it does not affect behavior after initialization.
    """

    scheme: AdapterScheme
    target: str
    dims: ModelDims
    shared_B: Node | None = None
    shared_A_heads: list[Node] | None = None
    head_B: list[Node] | None = None
    head_A: list[Node] | None = None
    bias_delta: Node | None = None
    init_seed: tuple[int, ...] = ()


def _validate_scheme_for_dims(scheme: AdapterScheme, dims: ModelDims) -> None:
    if scheme.uses_lite_basis and scheme.rank_head > dims.head_dim:
        raise ConfigError(
            f"{scheme.kind.value}: rank_head {scheme.rank_head} exceeds head capacity"
            f" p={dims.head_dim}"
        )


def init_adapter(scheme: AdapterScheme, target: str, dims: ModelDims, seed) -> AdapterState:
    """Build a zero-update adapter: B-side factors zero, A-side Gaussian.

    A-side entries are N(0, 1/rank) with the draw order fixed (shared A
    slices by head, then head A slices by head) so equal seeds give
    bit-identical states.
    """
    if target not in TARGETS:
        raise ConfigError(f"target must be one of {TARGETS}, got {target!r}")
    _validate_scheme_for_dims(scheme, dims)
    d, p, n_heads = dims.model_dim, dims.head_dim, dims.n_heads
    rng = np.random.default_rng(seed)
    state = AdapterState(
        scheme=scheme, target=target, dims=dims,
        init_seed=tuple(np.atleast_1d(seed).astype(int).tolist()),
    )
    if scheme.rank_shared:
        r = scheme.rank_shared
        state.shared_B = leaf(np.zeros((d, r)), requires_grad=True)
        state.shared_A_heads = [
            leaf(rng.standard_normal((r, p)) / np.sqrt(r), requires_grad=True)
            for _ in range(n_heads)
        ]
    if scheme.rank_head:
        r = scheme.rank_head
        b_rows = p if scheme.uses_lite_basis else d
        state.head_B = [
            leaf(np.zeros((b_rows, r)), requires_grad=True) for _ in range(n_heads)
        ]
        state.head_A = [
            leaf(rng.standard_normal((r, p)) / np.sqrt(r), requires_grad=True)
            for _ in range(n_heads)
        ]
    if scheme.include_bias:
        state.bias_delta = leaf(np.zeros((1, d)), requires_grad=True)
    return state


def randomize_factors(state: AdapterState, seed, std: float = 1.0) -> AdapterState:
    """Overwrite every factor with N(0, std^2) entries (rank/structure
    diagnostics want generic, nonzero updates; training never calls this)."""
    rng = np.random.default_rng(seed)
    for _, node in named_trainable_params(state):
        node.value = std * rng.standard_normal(node.value.shape)
        node.grad = None
    return state


def _frozen_key_block(weights: AttentionWeights | None, state: AdapterState, h: int) -> Node:
    if weights is None:
        raise ContractError(
            f"{state.scheme.kind.value} on target {state.target!r} needs the frozen"
            " key weights to form its basis"
        )
    lo, hi = state.dims.head_slice(h)
    return slice_cols(weights.w_k, lo, hi)


def _delta_block(state: AdapterState, weights: AttentionWeights | None, h: int) -> Node:
    """Head-h column block of the update, in the scheme's native orientation."""
    kind = state.scheme.kind
    parts: list[Node] = []
    if kind in _SHARED_KINDS:
        parts.append(matmul(state.shared_B, state.shared_A_heads[h]))
    if kind in _HEAD_KINDS:
        if state.scheme.uses_lite_basis:
            basis = matmul(_frozen_key_block(weights, state, h), state.head_B[h])
        else:
            basis = state.head_B[h]
        parts.append(matmul(basis, state.head_A[h]))
    block = parts[0]
    for extra in parts[1:]:
        block = add(block, extra)
    return block


def compose_delta(state: AdapterState, weights: AttentionWeights | None,
                  dims: ModelDims) -> Node:
    """Assemble the full d x d update.

    For targets q/k/v the head blocks are columns; for target o the same
    construction is built in the transpose orientation and transposed, so the
    blocks land on W_o's head rows.
    """
    if dims != state.dims:
        raise ShapeError(f"dims mismatch: state {state.dims} vs {dims}")
    blocks = [_delta_block(state, weights, h) for h in range(dims.n_heads)]
    delta = concat_cols(blocks)
    if state.target == "o":
        delta = transpose(delta)
    return delta


def adapted_weight(w_base: Node | Matrix, state: AdapterState,
                   weights: AttentionWeights | None, dims: ModelDims) -> Node:
    """Frozen base plus composed update; the base matrix is never mutated."""
    return add(as_node(w_base), compose_delta(state, weights, dims))


def delta_forward(x: Node | Matrix, state: AdapterState,
                  weights: AttentionWeights | None, dims: ModelDims,
                  key_product: Node | None = None) -> Node:
    """x @ DW without materializing DW, associating products x-first.

    ``key_product`` is an optional precomputed bias-free key projection
    x @ W_k; when given, lite bases reuse it instead of recomputing the
    product (the key-reuse trick). For target o, ``x`` is the concatenated
    head output matrix L and the result is L @ DW_o = sum_h L_h (block_h)^T.
    """
    x = as_node(x)
    d = dims.model_dim
    if x.value.shape[1] != d:
        raise ShapeError(f"input columns {x.value.shape[1]} != model dim {d}")
    kind = state.scheme.kind

    if state.target != "o":
        parts: list[Node] = []
        if kind in _SHARED_KINDS:
            xb = matmul(x, state.shared_B)
            parts.append(concat_cols([matmul(xb, a) for a in state.shared_A_heads]))
        if kind in _HEAD_KINDS:
            if state.scheme.uses_lite_basis:
                if key_product is not None:
                    xwk = as_node(key_product)
                    if xwk.value.shape != (x.value.shape[0], d):
                        raise ShapeError(
                            f"precomputed key product shape {xwk.value.shape} != "
                            f"{(x.value.shape[0], d)}"
                        )
                elif weights is not None:
                    xwk = matmul(x, weights.w_k)
                else:
                    raise ContractError(
                        f"{kind.value} on target {state.target!r} needs the frozen"
                        " key weights to form its basis"
                    )
                blocks = [
                    matmul(matmul(slice_cols(xwk, *dims.head_slice(h)), state.head_B[h]),
                           state.head_A[h])
                    for h in range(dims.n_heads)
                ]
            else:
                blocks = [
                    matmul(matmul(x, state.head_B[h]), state.head_A[h])
                    for h in range(dims.n_heads)
                ]
            parts.append(concat_cols(blocks))
        out = parts[0]
        for extra in parts[1:]:
            out = add(out, extra)
        return out

    # target o: L @ DW_o with DW_o row-block h = (column block h of the
    # transpose-orientation update)^T
    x_heads = [slice_cols(x, *dims.head_slice(h)) for h in range(dims.n_heads)]
    total: Node | None = None
    if kind in _SHARED_KINDS:
        acc: Node | None = None
        for h, a in enumerate(state.shared_A_heads):
            term = matmul(x_heads[h], transpose(a))
            acc = term if acc is None else add(acc, term)
        total = matmul(acc, transpose(state.shared_B))
    if kind in _HEAD_KINDS:
        for h in range(dims.n_heads):
            term = matmul(x_heads[h], transpose(state.head_A[h]))
            term = matmul(term, transpose(state.head_B[h]))
            if state.scheme.uses_lite_basis:
                term = matmul(term, transpose(_frozen_key_block(weights, state, h)))
            total = term if total is None else add(total, term)
    return total


def factored_forward(x: Node | Matrix, w_base: Node | Matrix, state: AdapterState,
                     weights: AttentionWeights | None, dims: ModelDims) -> Node:
    """x @ W_base + x @ DW via the factored path (no d x d product)."""
    x = as_node(x)
    return add(matmul(x, as_node(w_base)), delta_forward(x, state, weights, dims))


def lite_fast_forward(x: Node | Matrix, k_precomputed: Node | Matrix,
                      state: AdapterState, w_base: Node | Matrix) -> Node:
    """Key-reuse forward for kernel-wise-lite on a projection target.

    ``k_precomputed`` must be the bias-free key projection x @ W_k of the same
    frozen weights (subtract ones @ b_k^T first if the cached K includes the
    bias); reusing it skips the x @ (W_k Bk A) recomputation. Returns
    x @ W_base + concat_h K_h Bk_h A_h, equal to the merged-weight path.
    """
    if state.scheme.kind is not SchemeKind.KERNEL_WISE_LITE:
        raise ContractError(
            f"fast path is defined for kernel-wise-lite only, got {state.scheme.kind.value}"
        )
    if state.target == "o":
        raise ContractError("fast path applies to projection targets, not the output map")
    x, k_precomputed = as_node(x), as_node(k_precomputed)
    dims = state.dims
    delta = delta_forward(x, state, None, dims, key_product=k_precomputed)
    return add(matmul(x, as_node(w_base)), delta)


def count_params(scheme: AdapterScheme, dims: ModelDims) -> int:
    """Exact trainable-parameter count of one adapted matrix."""
    _validate_scheme_for_dims(scheme, dims)
    d, p, n_heads = dims.model_dim, dims.head_dim, dims.n_heads
    total = 0
    if scheme.rank_shared:
        total += d * scheme.rank_shared + n_heads * scheme.rank_shared * p
    if scheme.rank_head:
        b_rows = p if scheme.uses_lite_basis else d
        total += n_heads * (b_rows * scheme.rank_head + scheme.rank_head * p)
    if scheme.include_bias:
        total += d
    return total


def named_trainable_params(state: AdapterState) -> list[tuple[str, Node]]:
    """Factor matrices in declaration order, with stable names."""
    out: list[tuple[str, Node]] = []
    if state.shared_B is not None:
        out.append(("shared_B", state.shared_B))
    if state.shared_A_heads is not None:
        out.extend((f"shared_A[{h}]", a) for h, a in enumerate(state.shared_A_heads))
    if state.head_B is not None:
        out.extend((f"head_B[{h}]", b) for h, b in enumerate(state.head_B))
    if state.head_A is not None:
        out.extend((f"head_A[{h}]", a) for h, a in enumerate(state.head_A))
    if state.bias_delta is not None:
        out.append(("bias_delta", state.bias_delta))
    return out


def trainable_params(state: AdapterState) -> list[Node]:
    return [node for _, node in named_trainable_params(state)]

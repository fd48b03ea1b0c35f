"""Multi-head attention and its kernel-estimator reformulation.

Three equivalent ways of computing the same sub-layer live here:

* ``attention_layer``: project to Q/K/V, per-head softmax attention,
  concatenate head outputs, apply the output map W_o plus bias;
* ``kernel_view``: the unnormalized exponential-kernel matrix
  kappa[i, j] = exp(<q_i, k_j> / sqrt(p)) with its row-sum normalizer, so a
  head reads as a Nadaraya-Watson estimator D^-1 kappa(Q, K) C;
* ``rewritten_attention``: the head-sum form sum_h L_h V_h W_o_h, which folds
  the h-th row block of W_o into each head and omits the output bias.

The mutual agreement of these paths (to 1e-12) is what the analysis module
verifies; adapters rely on the head-block layout defined by ``head_slice``.

Self-attention only, no causal mask: the adapter schemes are mask-agnostic
and a mask would only obscure the kernel-form comparison. Key/value rows may
outnumber query rows (rectangular kernel matrices are supported).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .autodiff import (
    Matrix,
    Node,
    add,
    as_node,
    concat_cols,
    leaf,
    matmul,
    ones,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)
from .errors import ShapeError

TARGETS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelDims:
    """Architecture shape: layer count, head count/width, and the base
    parameter total used as the denominator of budget percentages."""

    n_layers: int
    n_heads: int
    head_dim: int
    base_param_total: int

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "base_param_total"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelDims.{name} must be positive, got {getattr(self, name)}")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    def head_slice(self, h: int) -> tuple[int, int]:
        """Column range [h*p, (h+1)*p) of head h (rows for W_o blocks)."""
        if not 0 <= h < self.n_heads:
            raise IndexError(f"head {h} out of range for {self.n_heads} heads")
        return h * self.head_dim, (h + 1) * self.head_dim

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "base_param_total": self.base_param_total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        return cls(
            n_layers=int(d["n_layers"]),
            n_heads=int(d["n_heads"]),
            head_dim=int(d["head_dim"]),
            base_param_total=int(d["base_param_total"]),
        )


# GPT-2 small shape; the parameter total is the published 124M figure.
GPT2_SMALL = ModelDims(n_layers=12, n_heads=12, head_dim=64, base_param_total=124_439_808)


@dataclass
class AttentionWeights:
    """One sub-layer's projection weights (d x d) and biases (1 x d).

    Biases enter forward passes as rank-1 terms ones(n,1) @ b, so their
    gradients come out of the ordinary matmul rule.
    """

    w_q: Node
    w_k: Node
    w_v: Node
    w_o: Node
    b_q: Node
    b_k: Node
    b_v: Node
    b_o: Node

    NAMES = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")

    @classmethod
    def from_arrays(cls, arrays: dict[str, Matrix], trainable: bool = False) -> "AttentionWeights":
        return cls(**{name: leaf(arrays[name], requires_grad=trainable) for name in cls.NAMES})

    @classmethod
    def random(cls, dims: ModelDims, seed, std: float | None = None,
               trainable: bool = False) -> "AttentionWeights":
        d = dims.model_dim
        std = (1.0 / np.sqrt(d)) if std is None else std
        rng = np.random.default_rng(seed)
        arrays = {}
        for name in ("w_q", "w_k", "w_v", "w_o"):
            arrays[name] = std * rng.standard_normal((d, d))
        for name in ("b_q", "b_k", "b_v", "b_o"):
            arrays[name] = std * rng.standard_normal((1, d))
        return cls.from_arrays(arrays, trainable=trainable)

    def arrays(self) -> dict[str, Matrix]:
        return {name: getattr(self, name).value for name in self.NAMES}

    def weight_for(self, target: str) -> Node:
        return getattr(self, f"w_{target}")

    def bias_for(self, target: str) -> Node:
        return getattr(self, f"b_{target}")


@dataclass
class KernelEstimatorView:
    """Unnormalized kernel matrix with its row-sum normalizer.

    ``coefficients`` is left to the caller: plugging in V gives back plain
    attention, plugging in V @ W_o_h gives the extended per-head estimator.
    """

    kernel_matrix: Matrix
    normalizer: Matrix
    coefficients: Matrix | None = None

    def estimate(self, coefficients: Matrix | None = None) -> Matrix:
        """Evaluate D^-1 kappa(Q, K) C for the given coefficient matrix."""
        c = self.coefficients if coefficients is None else coefficients
        if c is None:
            raise ValueError("no coefficient matrix supplied")
        if c.shape[0] != self.kernel_matrix.shape[1]:
            raise ShapeError(
                f"coefficients rows {c.shape[0]} != kernel columns {self.kernel_matrix.shape[1]}"
            )
        return (self.kernel_matrix / self.normalizer) @ c


def affine(x: Node | Matrix, w: Node, b: Node) -> Node:
    """x @ w + ones @ b, the biased projection used for Q, K, V and the output."""
    x = as_node(x)
    return add(matmul(x, w), matmul(ones(x.value.shape[0], 1), b))


def project_qkv(x: Node | Matrix, w: AttentionWeights) -> tuple[Node, Node, Node]:
    """Biased Q/K/V projections of a sequence (rows are positions)."""
    x = as_node(x)
    d = w.w_q.value.shape[0]
    if x.value.shape[1] != d:
        raise ShapeError(f"input columns {x.value.shape[1]} != model dim {d}")
    return (
        affine(x, w.w_q, w.b_q),
        affine(x, w.w_k, w.b_k),
        affine(x, w.w_v, w.b_v),
    )


def attention_head(qh: Node | Matrix, kh: Node | Matrix, vh: Node | Matrix,
                   head_dim: int) -> Node:
    """softmax(qh @ kh^T / sqrt(p)) @ vh for one head."""
    qh, kh, vh = as_node(qh), as_node(kh), as_node(vh)
    p = int(head_dim)
    if qh.value.shape[1] != p or kh.value.shape[1] != p:
        raise ShapeError(
            f"head width mismatch: q {qh.value.shape}, k {kh.value.shape}, head_dim {p}"
        )
    if kh.value.shape[0] != vh.value.shape[0]:
        raise ShapeError(
            f"key rows {kh.value.shape[0]} != value rows {vh.value.shape[0]}"
        )
    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(p))
    return matmul(softmax_rows(scores), vh)


def split_heads(m: Node, dims: ModelDims) -> list[Node]:
    return [slice_cols(m, *dims.head_slice(h)) for h in range(dims.n_heads)]


def attention_layer(x: Node | Matrix, w: AttentionWeights, dims: ModelDims) -> Node:
    """Full sub-layer: concat of per-head outputs, then the output map."""
    x = as_node(x)
    q, k, v = project_qkv(x, w)
    heads = [
        attention_head(qh, kh, vh, dims.head_dim)
        for qh, kh, vh in zip(split_heads(q, dims), split_heads(k, dims), split_heads(v, dims))
    ]
    return affine(concat_cols(heads), w.w_o, w.b_o)


def kernel_view(qh: Matrix, kh: Matrix, head_dim: int) -> KernelEstimatorView:
    """Empirical kernel matrix exp(<q_i, k_j>/sqrt(p)) and its row sums."""
    qh = np.asarray(qh, dtype=np.float64)
    kh = np.asarray(kh, dtype=np.float64)
    p = int(head_dim)
    if qh.shape[1] != p or kh.shape[1] != p:
        raise ShapeError(f"head width mismatch: q {qh.shape}, k {kh.shape}, head_dim {p}")
    kernel = backend.exp_scaled(qh @ kh.T, 1.0 / np.sqrt(p))
    normalizer = kernel.sum(axis=1, keepdims=True)
    return KernelEstimatorView(kernel_matrix=kernel, normalizer=normalizer)


def rewritten_attention(x: Node | Matrix, w: AttentionWeights, dims: ModelDims) -> Node:
    """Head-sum form sum_h L_h V_h W_o_h; equals attention_layer minus the
    output bias (the bias is outside every head's coefficient part)."""
    x = as_node(x)
    q, k, v = project_qkv(x, w)
    p = dims.head_dim
    total: Node | None = None
    for h in range(dims.n_heads):
        lo, hi = dims.head_slice(h)
        head_out = attention_head(
            slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi), p
        )
        term = matmul(head_out, slice_rows(w.w_o, lo, hi))
        total = term if total is None else add(total, term)
    return total

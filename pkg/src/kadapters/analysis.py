"""Numerical verification: rank diagnostics, dual-path equivalence, gradient audits.

Everything here is an oracle for a claim made elsewhere in the package:

* ``rank_analysis`` measures the column-space structure of a composed update
  (shared space for lora, head-specific spaces for kernel-wise, key-span
  confinement for the lite variants);
* ``verify_kernel_equivalence`` recomputes per-head attention through the
  normalized-kernel path and compares against the softmax path;
* ``verify_rewrite_equivalence`` compares the concat-then-project layer
  against the per-head sum form (output bias excluded from the sum form);
* ``grad_audit`` replays every trainable factor through central finite
  differences and reports the worst relative disagreement with backward().

Ranks use full SVD with a relative singular-value threshold (default 1e-8);
the matrices involved are small enough that nothing smarter is warranted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterScheme, SchemeKind, compose_delta, init_adapter, randomize_factors
from .attention import AttentionWeights, ModelDims, attention_head, attention_layer, kernel_view, rewritten_attention
from .autodiff import backward, finite_diff_grad, reset_grads
from .errors import ContractError

DEFAULT_RANK_THRESHOLD = 1e-8


def numerical_rank(m: np.ndarray, threshold: float = DEFAULT_RANK_THRESHOLD) -> int:
    """Count singular values above threshold * sigma_max."""
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > threshold * s[0]).sum())


def column_space_basis(m: np.ndarray, threshold: float = DEFAULT_RANK_THRESHOLD) -> np.ndarray:
    u, s, _ = np.linalg.svd(np.asarray(m, dtype=np.float64), full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0]
    return u[:, : int((s > threshold * s[0]).sum())]


def column_space_contained(basis: np.ndarray, block: np.ndarray,
                           threshold: float = DEFAULT_RANK_THRESHOLD) -> bool:
    """True iff span(block) is inside span(basis): adjoining block adds no rank."""
    joint = np.hstack([basis, block])
    return numerical_rank(joint, threshold) == numerical_rank(basis, threshold)


@dataclass(frozen=True)
class RankReport:
    per_head_rank: list[int]
    full_rank: int
    shared_space_dim: int
    threshold: float

    def to_dict(self) -> dict:
        return {
            "per_head_rank": list(self.per_head_rank),
            "full_rank": self.full_rank,
            "shared_space_dim": self.shared_space_dim,
            "threshold": self.threshold,
        }


def rank_analysis(delta: np.ndarray, dims: ModelDims,
                  threshold: float = DEFAULT_RANK_THRESHOLD) -> RankReport:
    """Rank structure of a d x d update whose head blocks are columns.

    For output-map updates (head blocks on rows) pass delta.T. shared_space_dim
    is the dimension of the union of all head-block column spaces: the rank of
    the concatenated per-block orthonormal bases.
    """
    delta = np.asarray(delta, dtype=np.float64)
    d = dims.model_dim
    if delta.shape != (d, d):
        raise ContractError(f"expected a {d}x{d} update, got {delta.shape}")
    if not np.isfinite(delta).all():
        raise ContractError("update contains non-finite entries")
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    per_head = []
    bases = []
    for h in range(dims.n_heads):
        lo, hi = dims.head_slice(h)
        block = delta[:, lo:hi]
        per_head.append(numerical_rank(block, threshold))
        bases.append(column_space_basis(block, threshold))
    joint = np.hstack(bases) if any(b.shape[1] for b in bases) else np.zeros((d, 1))
    return RankReport(
        per_head_rank=per_head,
        full_rank=numerical_rank(delta, threshold),
        shared_space_dim=numerical_rank(joint, threshold),
        threshold=threshold,
    )


@dataclass
class SuiteReport:
    """Outcome of one verification suite, serializable for replay."""

    suite: str
    passed: bool
    trials: int
    tolerance: float
    worst: float
    worst_case: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "trials": self.trials,
            "tolerance": self.tolerance,
            "worst": self.worst,
            "worst_case": dict(self.worst_case),
            "failures": list(self.failures),
            "notes": list(self.notes),
        }


def verify_kernel_equivalence(dims: ModelDims, trials: int, seed: int,
                              tolerance: float = 1e-12) -> SuiteReport:
    """Softmax attention vs normalized kernel estimate, random heads.

    Query and key/value row counts are drawn independently, so rectangular
    kernel matrices (more or fewer supporting points than queries) are
    exercised alongside the square case.
    """
    if trials < 1:
        raise ContractError(f"trials must be >= 1, got {trials}")
    p = dims.head_dim
    rng = np.random.default_rng([seed, 13])
    worst = 0.0
    worst_case: dict = {}
    failures: list[dict] = []
    for trial in range(trials):
        n = int(rng.integers(1, 7))
        n_keys = int(rng.integers(1, 9))
        qh = rng.standard_normal((n, p))
        kh = rng.standard_normal((n_keys, p))
        vh = rng.standard_normal((n_keys, p))
        softmax_path = attention_head(qh, kh, vh, p).value
        kernel_path = kernel_view(qh, kh, p).estimate(vh)
        diff = float(np.abs(softmax_path - kernel_path).max())
        case = {"trial": trial, "n": n, "n_keys": n_keys, "diff": diff}
        if diff > worst:
            worst, worst_case = diff, case
        if diff > tolerance:
            failures.append(case)
    return SuiteReport(
        suite="kernel", passed=not failures, trials=trials,
        tolerance=tolerance, worst=worst, worst_case=worst_case, failures=failures,
    )


def verify_rewrite_equivalence(dims: ModelDims, trials: int, seed: int,
                               tolerance: float = 1e-12) -> SuiteReport:
    """Concat-then-project layer vs head-sum form, random weights and inputs."""
    if trials < 1:
        raise ContractError(f"trials must be >= 1, got {trials}")
    d = dims.model_dim
    rng = np.random.default_rng([seed, 17])
    worst = 0.0
    worst_case: dict = {}
    failures: list[dict] = []
    for trial in range(trials):
        n = int(rng.integers(1, 7))
        weights = AttentionWeights.random(dims, seed=[seed, 17, trial])
        x = rng.standard_normal((n, d))
        concat_form = attention_layer(x, weights, dims).value - weights.b_o.value
        sum_form = rewritten_attention(x, weights, dims).value
        diff = float(np.abs(concat_form - sum_form).max())
        case = {"trial": trial, "n": n, "diff": diff}
        if diff > worst:
            worst, worst_case = diff, case
        if diff > tolerance:
            failures.append(case)
    return SuiteReport(
        suite="rewrite", passed=not failures, trials=trials,
        tolerance=tolerance, worst=worst, worst_case=worst_case, failures=failures,
        notes=("output bias stays outside the head-sum form and every adapter scheme",),
    )


@dataclass
class GradAuditReport:
    worst_rel_error: float
    worst_param: str
    params_audited: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.params_audited == 0 or self.worst_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "worst_rel_error": self.worst_rel_error,
            "worst_param": self.worst_param,
            "params_audited": self.params_audited,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def grad_audit(stack, adapters, batch, fd_step: float = 1e-5,
               tolerance: float = 1e-6) -> GradAuditReport:
    """Backward() vs central finite differences on every trainable factor.

    ``stack`` is anything with forward_node(x, adapters); the loss is the
    batch-mean squared error against the provided targets. Relative error per
    factor is max|analytic - fd| / max(max|fd|, 1e-12).
    """
    from .harness import batch_loss, named_plan_params

    named = named_plan_params(adapters)
    if not named:
        return GradAuditReport(0.0, "", 0, tolerance)
    params = [node for _, node in named]
    reset_grads(params)
    loss = batch_loss(stack, adapters, batch)
    backward(loss)
    analytic = {name: (np.zeros_like(node.value) if node.grad is None else node.grad.copy())
                for name, node in named}
    reset_grads(params)

    worst = 0.0
    worst_param = ""
    for name, node in named:
        original = node.value

        def loss_at(matrix):
            node.value = matrix
            return float(batch_loss(stack, adapters, batch).value[0, 0])

        fd = finite_diff_grad(loss_at, original, fd_step)
        node.value = original
        denom = max(float(np.abs(fd).max()), 1e-12)
        rel = float(np.abs(analytic[name] - fd).max()) / denom
        if rel > worst:
            worst, worst_param = rel, name
    return GradAuditReport(worst, worst_param, len(named), tolerance)


def verify_rank_structure(dims: ModelDims, seeds: int = 50,
                          threshold: float = DEFAULT_RANK_THRESHOLD,
                          lora_rank: int = 4, wise_rank: int = 1,
                          lite_rank: int = 2) -> SuiteReport:
    """Structural rank claims over randomized factor draws.

    Per seed: a lora update has full rank exactly its shared rank with every
    head block inside span(B); a kernel-wise update reaches rank
    n_heads * rank; lite head blocks stay inside span(W_k_h).
    """
    failures: list[dict] = []
    for seed in range(seeds):
        weights = AttentionWeights.random(dims, seed=[seed, 23])

        state = randomize_factors(
            init_adapter(AdapterScheme(SchemeKind.LORA, rank_shared=lora_rank),
                         "q", dims, seed=[seed, 29]),
            seed=[seed, 31],
        )
        delta = compose_delta(state, weights, dims).value
        rep = rank_analysis(delta, dims, threshold)
        shared_b = state.shared_B.value
        if rep.full_rank != lora_rank:
            failures.append({"seed": seed, "claim": "lora-full-rank", "got": rep.full_rank})
        for h in range(dims.n_heads):
            lo, hi = dims.head_slice(h)
            if not column_space_contained(shared_b, delta[:, lo:hi], threshold):
                failures.append({"seed": seed, "claim": "lora-shared-span", "head": h})

        state = randomize_factors(
            init_adapter(AdapterScheme(SchemeKind.KERNEL_WISE, rank_head=wise_rank),
                         "q", dims, seed=[seed, 37]),
            seed=[seed, 41],
        )
        rep = rank_analysis(compose_delta(state, weights, dims).value, dims, threshold)
        expected = min(dims.n_heads * wise_rank, dims.model_dim)
        if rep.full_rank != expected:
            failures.append({"seed": seed, "claim": "wise-full-rank", "got": rep.full_rank})

        state = randomize_factors(
            init_adapter(AdapterScheme(SchemeKind.KERNEL_WISE_LITE, rank_head=lite_rank),
                         "q", dims, seed=[seed, 43]),
            seed=[seed, 47],
        )
        delta = compose_delta(state, weights, dims).value
        for h in range(dims.n_heads):
            lo, hi = dims.head_slice(h)
            basis = weights.w_k.value[:, lo:hi]
            if not column_space_contained(basis, delta[:, lo:hi], threshold):
                failures.append({"seed": seed, "claim": "lite-key-span", "head": h})
    return SuiteReport(
        suite="rank", passed=not failures, trials=seeds,
        tolerance=threshold, worst=float(len(failures)),
        failures=failures[:10],
    )

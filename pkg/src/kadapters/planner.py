"""Budget planning: preset scheme assignments and parameter accounting.

A plan assigns at most one scheme per target matrix (uniform across layers);
its report gives the per-layer and total trainable-parameter counts and the
percentage of the base model those represent. Parameters to train and to
store are the same number for every scheme here, so reports carry one total.

The preset registry reproduces the published rank settings per variant.
``lora-54`` uses rank 54: the source table prints rank 4 for it, but only
rank 54 reproduces the stated 1.61% budget, so the 4 is treated as a typo.
One preset (kernel-mix-lite-qv-small) computes to 0.12% against a stated
0.13%; its report carries both figures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .adapters import AdapterScheme, SchemeKind, count_params
from .attention import ModelDims, TARGETS
from .errors import ConfigError, UnknownPlanError


@dataclass(frozen=True)
class BudgetPlan:
    """Per-target scheme assignment plus the dims it is accounted against.

    ``published_percent`` is the externally stated budget figure for presets
    (None for custom plans); reports compare against it.
    """

    name: str
    per_target: Mapping[str, AdapterScheme | None]
    dims: ModelDims
    include_bias: bool = True
    published_percent: float | None = None

    def __post_init__(self):
        unknown = set(self.per_target) - set(TARGETS)
        if unknown:
            raise ConfigError(f"unknown targets in plan: {sorted(unknown)}")
        if not any(self.per_target.get(t) for t in TARGETS):
            raise ConfigError("plan adapts no target")
        for target, scheme in self.per_target.items():
            if scheme is None:
                continue
            if scheme.uses_lite_basis and scheme.rank_head > self.dims.head_dim:
                raise ConfigError(
                    f"per_target.{target}: lite rank {scheme.rank_head} exceeds"
                    f" head capacity p={self.dims.head_dim}"
                )

    def adapted_targets(self) -> list[str]:
        return [t for t in TARGETS if self.per_target.get(t) is not None]

    def scheme_for(self, target: str) -> AdapterScheme | None:
        return self.per_target.get(target)


@dataclass(frozen=True)
class BudgetReport:
    """Accounting for one plan: totals, percentage, per-target split.

    ``per_target_breakdown`` counts the bias inside its target;
    ``ratio_q_v_o`` is computed on factor counts only (bias excluded) and
    normalized by the smallest adapted entry.
    """

    plan_name: str
    params_per_layer: int
    params_total: int
    percent_of_base: float
    per_target_breakdown: dict[str, int]
    ratio_q_v_o: tuple[float, float, float]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "plan_name": self.plan_name,
            "params_per_layer": self.params_per_layer,
            "params_total": self.params_total,
            "percent_of_base": self.percent_of_base,
            "per_target_breakdown": dict(self.per_target_breakdown),
            "ratio_q_v_o": list(self.ratio_q_v_o),
            "notes": list(self.notes),
        }


def _s(kind: SchemeKind, shared: int = 0, head: int = 0) -> dict:
    return {"kind": kind, "rank_shared": shared, "rank_head": head}


# target -> (kind, rank_shared, rank_head); bias trained on every adapted target
_PRESETS: dict[str, dict] = {
    "lora-4": {
        "targets": {"q": _s(SchemeKind.LORA, shared=4), "v": _s(SchemeKind.LORA, shared=4)},
        "published_percent": 0.13,
    },
    "lora-54": {
        "targets": {"q": _s(SchemeKind.LORA, shared=54), "v": _s(SchemeKind.LORA, shared=54)},
        "published_percent": 1.61,
    },
    "kernel-mix-lite-qv-tiny": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_MIX_LITE, shared=1, head=1),
            "v": _s(SchemeKind.KERNEL_MIX_LITE, shared=1, head=1),
        },
        "published_percent": 0.07,
    },
    "kernel-mix-lite-qv-small": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_MIX_LITE, shared=2, head=2),
            "v": _s(SchemeKind.KERNEL_MIX_LITE, shared=2, head=1),
        },
        "published_percent": 0.13,
    },
    "kernel-mix-qvo-intermediate": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_MIX, shared=12, head=3),
            "v": _s(SchemeKind.KERNEL_MIX_LITE, shared=8, head=8),
            "o": _s(SchemeKind.KERNEL_MIX, shared=8, head=8),
        },
        "published_percent": 1.61,
    },
    "kernel-wise-lite-qv-small": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_WISE_LITE, head=4),
            "v": _s(SchemeKind.KERNEL_WISE_LITE, head=4),
        },
        "published_percent": 0.13,
    },
    "kernel-wise-mq": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_WISE, head=12),
            "v": _s(SchemeKind.KERNEL_WISE, head=4),
        },
        "published_percent": 1.56,
    },
    "kernel-wise-mv": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_WISE, head=4),
            "v": _s(SchemeKind.KERNEL_WISE, head=12),
        },
        "published_percent": 1.56,
    },
    "kernel-wise-qvo": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_WISE, head=5),
            "v": _s(SchemeKind.KERNEL_WISE_LITE, head=10),
            "o": _s(SchemeKind.KERNEL_WISE, head=10),
        },
        "published_percent": 1.61,
    },
    "kernel-mix-qvo-nlu": {
        "targets": {
            "q": _s(SchemeKind.KERNEL_MIX, shared=2, head=1),
            "v": _s(SchemeKind.KERNEL_MIX_LITE, shared=4, head=2),
            "o": _s(SchemeKind.KERNEL_MIX, shared=4, head=2),
        },
        "published_percent": 0.5,
    },
}


def registered_plan_names() -> tuple[str, ...]:
    return tuple(sorted(_PRESETS))


def builtin_plan(name: str, dims: ModelDims) -> BudgetPlan:
    """Look up a registered preset and bind it to the given dims."""
    if name not in _PRESETS:
        raise UnknownPlanError(
            f"unknown plan {name!r}; registered plans: {', '.join(registered_plan_names())}"
        )
    preset = _PRESETS[name]
    per_target: dict[str, AdapterScheme | None] = {t: None for t in TARGETS}
    for target, spec in preset["targets"].items():
        per_target[target] = AdapterScheme(
            kind=spec["kind"],
            rank_shared=spec["rank_shared"],
            rank_head=spec["rank_head"],
            include_bias=True,
        )
    return BudgetPlan(
        name=name, per_target=per_target, dims=dims,
        include_bias=True, published_percent=preset["published_percent"],
    )


def report(plan: BudgetPlan) -> BudgetReport:
    """Sum counts over targets and layers; percentages use the base total."""
    dims = plan.dims
    breakdown: dict[str, int] = {}
    factor_only: dict[str, int] = {}
    for target in plan.adapted_targets():
        scheme = plan.per_target[target]
        breakdown[target] = count_params(scheme, dims)
        factor_only[target] = breakdown[target] - (dims.model_dim if scheme.include_bias else 0)
    per_layer = sum(breakdown.values())
    total = per_layer * dims.n_layers
    percent = 100.0 * total / dims.base_param_total

    positive = [v for v in factor_only.values() if v > 0]
    unit = min(positive) if positive else 1
    ratio = tuple(factor_only.get(t, 0) / unit for t in ("q", "v", "o"))

    notes: list[str] = []
    if plan.published_percent is not None and round(percent, 2) != plan.published_percent:
        notes.append(
            f"computed budget {percent:.3f}% rounds to {round(percent, 2):.2f}%,"
            f" while the published figure is {plan.published_percent:.2f}%"
        )
    return BudgetReport(
        plan_name=plan.name,
        params_per_layer=per_layer,
        params_total=total,
        percent_of_base=percent,
        per_target_breakdown=breakdown,
        ratio_q_v_o=ratio,
        notes=tuple(notes),
    )


def custom_plan(config: Mapping) -> BudgetPlan:
    """Validate a parsed configuration into a BudgetPlan.

    Expected shape::

        {"name": ..., "include_bias": true,
         "dims": {"n_layers": ..., "n_heads": ..., "head_dim": ..., "base_param_total": ...},
         "targets": {"q": {"kind": "lora", "rank_shared": 4, "rank_head": 0}, ...}}
    """
    try:
        dims = ModelDims.from_dict(config["dims"])
    except KeyError as exc:
        raise ConfigError(f"dims: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dims: {exc}") from exc
    name = str(config.get("name", "custom"))
    include_bias = bool(config.get("include_bias", True))
    targets_cfg = config.get("targets")
    if not isinstance(targets_cfg, Mapping) or not targets_cfg:
        raise ConfigError("targets: must be a non-empty mapping")
    per_target: dict[str, AdapterScheme | None] = {t: None for t in TARGETS}
    for target, spec in targets_cfg.items():
        if target not in TARGETS:
            raise ConfigError(f"targets.{target}: unknown target (use one of {TARGETS})")
        if spec is None:
            continue
        try:
            scheme = AdapterScheme(
                kind=SchemeKind(spec["kind"]),
                rank_shared=int(spec.get("rank_shared", 0)),
                rank_head=int(spec.get("rank_head", 0)),
                include_bias=bool(spec.get("include_bias", include_bias)),
            )
        except KeyError as exc:
            raise ConfigError(f"targets.{target}: missing field {exc}") from exc
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"targets.{target}: {exc}") from exc
        if scheme.uses_lite_basis and scheme.rank_head > dims.head_dim:
            raise ConfigError(
                f"targets.{target}.rank_head: lite rank {scheme.rank_head} exceeds"
                f" head capacity p={dims.head_dim}"
            )
        per_target[target] = scheme
    paper = config.get("published_percent")
    return BudgetPlan(
        name=name, per_target=per_target, dims=dims,
        include_bias=include_bias,
        published_percent=None if paper is None else float(paper),
    )


def plan_to_dict(plan: BudgetPlan) -> dict:
    return {
        "name": plan.name,
        "include_bias": plan.include_bias,
        "dims": plan.dims.to_dict(),
        "targets": {
            t: (None if s is None else s.to_dict()) for t, s in plan.per_target.items()
        },
        "published_percent": plan.published_percent,
    }


def plan_from_dict(d: Mapping) -> BudgetPlan:
    return custom_plan(d)

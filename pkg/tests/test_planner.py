import pytest

from kadapters.adapters import SchemeKind, init_adapter, trainable_params
from kadapters.attention import GPT2_SMALL
from kadapters.errors import ConfigError, UnknownPlanError
from kadapters.harness import toy_dims
from kadapters.planner import (
    builtin_plan,
    custom_plan,
    plan_from_dict,
    plan_to_dict,
    registered_plan_names,
    report,
)

# (name, expected params_total at gpt2-small, expected rounded percent)
EXPECTED_BUDGETS = [
    ("lora-4", 165_888, 0.13),
    ("lora-54", 2_009_088, 1.61),
    ("kernel-mix-lite-qv-tiny", 92_160, 0.07),
    ("kernel-mix-lite-qv-small", 147_456, 0.12),
    ("kernel-mix-qvo-intermediate", 2_009_088, 1.61),
    ("kernel-wise-lite-qv-small", 165_888, 0.13),
    ("kernel-wise-mq", 1_935_360, 1.56),
    ("kernel-wise-mv", 1_935_360, 1.56),
    ("kernel-wise-qvo", 2_009_088, 1.61),
    ("kernel-mix-qvo-nlu", 608_256, 0.49),
]


def test_registry_contents():
    assert set(registered_plan_names()) == {name for name, _, _ in EXPECTED_BUDGETS}


def test_unknown_plan_lists_registered_names():
    with pytest.raises(UnknownPlanError, match="lora-4"):
        builtin_plan("nope", GPT2_SMALL)


@pytest.mark.parametrize("name,total,percent", EXPECTED_BUDGETS)
def test_builtin_budgets(name, total, percent):
    rep = report(builtin_plan(name, GPT2_SMALL))
    assert rep.params_total == total
    assert round(rep.percent_of_base, 2) == percent
    assert rep.params_total == rep.params_per_layer * 12
    assert sum(rep.per_target_breakdown.values()) == rep.params_per_layer


def test_builtin_rank_settings():
    plan = builtin_plan("kernel-wise-mv", GPT2_SMALL)
    assert plan.per_target["q"].kind is SchemeKind.KERNEL_WISE
    assert plan.per_target["q"].rank_head == 4
    assert plan.per_target["v"].rank_head == 12

    plan = builtin_plan("kernel-wise-qvo", GPT2_SMALL)
    assert plan.per_target["q"].rank_head == 5
    assert plan.per_target["v"].kind is SchemeKind.KERNEL_WISE_LITE
    assert plan.per_target["v"].rank_head == 10
    assert plan.per_target["o"].rank_head == 10

    plan = builtin_plan("kernel-mix-qvo-nlu", GPT2_SMALL)
    assert (plan.per_target["q"].rank_shared, plan.per_target["q"].rank_head) == (2, 1)
    assert plan.per_target["v"].kind is SchemeKind.KERNEL_MIX_LITE
    assert (plan.per_target["v"].rank_shared, plan.per_target["v"].rank_head) == (4, 2)
    assert (plan.per_target["o"].rank_shared, plan.per_target["o"].rank_head) == (4, 2)

    plan = builtin_plan("kernel-mix-qvo-intermediate", GPT2_SMALL)
    assert (plan.per_target["q"].rank_shared, plan.per_target["q"].rank_head) == (12, 3)
    assert (plan.per_target["v"].rank_shared, plan.per_target["v"].rank_head) == (8, 8)
    assert (plan.per_target["o"].rank_shared, plan.per_target["o"].rank_head) == (8, 8)

    plan = builtin_plan("kernel-mix-lite-qv-tiny", GPT2_SMALL)
    assert (plan.per_target["q"].rank_shared, plan.per_target["q"].rank_head) == (1, 1)
    assert (plan.per_target["v"].rank_shared, plan.per_target["v"].rank_head) == (1, 1)

    plan = builtin_plan("kernel-wise-mq", GPT2_SMALL)
    assert plan.per_target["q"].rank_head == 12
    assert plan.per_target["v"].rank_head == 4


def test_intermediate_budgets_are_calibrated_equal():
    lora = report(builtin_plan("lora-54", GPT2_SMALL))
    mix = report(builtin_plan("kernel-mix-qvo-intermediate", GPT2_SMALL))
    assert lora.params_total == mix.params_total


def test_small_budgets_equal():
    assert (report(builtin_plan("lora-4", GPT2_SMALL)).params_total
            == report(builtin_plan("kernel-wise-lite-qv-small", GPT2_SMALL)).params_total)


def test_mq_breakdown_ratio_three_to_one():
    rep = report(builtin_plan("kernel-wise-mq", GPT2_SMALL))
    assert rep.per_target_breakdown["q"] == 119_808 + 768
    assert rep.per_target_breakdown["v"] == 39_936 + 768
    assert rep.ratio_q_v_o == (3.0, 1.0, 0.0)


def test_qvo_computed_ratio():
    rep = report(builtin_plan("kernel-wise-qvo", GPT2_SMALL))
    assert rep.ratio_q_v_o == (3.25, 1.0, 6.5)


def test_intermediate_breakdown_values():
    rep = report(builtin_plan("kernel-mix-qvo-intermediate", GPT2_SMALL))
    assert rep.per_target_breakdown["q"] == 48_384 + 768
    assert rep.per_target_breakdown["v"] == 24_576 + 768
    assert rep.per_target_breakdown["o"] == 92_160 + 768
    assert rep.params_per_layer == 167_424


def test_outlier_preset_is_flagged():
    rep = report(builtin_plan("kernel-mix-lite-qv-small", GPT2_SMALL))
    assert rep.notes and "0.13" in rep.notes[0] and "0.12" in rep.notes[0]
    clean = report(builtin_plan("lora-4", GPT2_SMALL))
    assert not clean.notes


@pytest.mark.parametrize("name", [n for n, _, _ in EXPECTED_BUDGETS])
def test_totals_reproduced_by_instantiating_factors(name):
    """Brute-force oracle: materialize every factor matrix and sum entries."""
    plan = builtin_plan(name, GPT2_SMALL)
    per_layer = 0
    for target in plan.adapted_targets():
        state = init_adapter(plan.per_target[target], target, GPT2_SMALL, seed=0)
        per_layer += sum(node.value.size for node in trainable_params(state))
    rep = report(plan)
    assert rep.params_per_layer == per_layer
    assert rep.params_total == per_layer * GPT2_SMALL.n_layers


def test_rank_monotonicity():
    base = report(builtin_plan("lora-4", GPT2_SMALL)).params_total
    bumped = custom_plan({
        "name": "lora-5",
        "dims": GPT2_SMALL.to_dict(),
        "targets": {"q": {"kind": "lora", "rank_shared": 5},
                    "v": {"kind": "lora", "rank_shared": 4}},
    })
    assert report(bumped).params_total > base


@pytest.mark.parametrize("kind,shared,head", [
    (SchemeKind.LORA, 2, 0),
    (SchemeKind.KERNEL_WISE, 0, 2),
    (SchemeKind.KERNEL_WISE_LITE, 0, 2),
    (SchemeKind.KERNEL_MIX, 2, 2),
    (SchemeKind.KERNEL_MIX_LITE, 2, 2),
])
def test_count_strictly_increases_in_every_rank(kind, shared, head):
    from kadapters.adapters import AdapterScheme, count_params

    base = count_params(AdapterScheme(kind, rank_shared=shared, rank_head=head), GPT2_SMALL)
    if shared:
        more = AdapterScheme(kind, rank_shared=shared + 1, rank_head=head)
        assert count_params(more, GPT2_SMALL) > base
    if head:
        more = AdapterScheme(kind, rank_shared=shared, rank_head=head + 1)
        assert count_params(more, GPT2_SMALL) > base


# ---------------------------------------------------------------------------
# custom plans
# ---------------------------------------------------------------------------

def test_custom_plan_single_target():
    plan = custom_plan({
        "name": "q-only",
        "dims": toy_dims().to_dict(),
        "targets": {"q": {"kind": "lora", "rank_shared": 4}},
    })
    assert plan.adapted_targets() == ["q"]
    assert plan.per_target["v"] is None


def test_custom_plan_rejects_lite_rank_beyond_capacity():
    dims = toy_dims()
    with pytest.raises(ConfigError, match="targets.v.rank_head"):
        custom_plan({
            "dims": dims.to_dict(),
            "targets": {"v": {"kind": "kernel-wise-lite",
                              "rank_head": dims.head_dim + 1}},
        })


def test_custom_plan_rejects_negative_rank():
    with pytest.raises(ConfigError, match="targets.q"):
        custom_plan({
            "dims": toy_dims().to_dict(),
            "targets": {"q": {"kind": "lora", "rank_shared": -1}},
        })


def test_custom_plan_rejects_unknown_target():
    with pytest.raises(ConfigError, match="targets.z"):
        custom_plan({
            "dims": toy_dims().to_dict(),
            "targets": {"z": {"kind": "lora", "rank_shared": 1}},
        })


def test_custom_plan_requires_some_target():
    with pytest.raises(ConfigError):
        custom_plan({"dims": toy_dims().to_dict(), "targets": {}})


@pytest.mark.parametrize("name", [n for n, _, _ in EXPECTED_BUDGETS])
def test_plan_serialization_round_trip(name):
    plan = builtin_plan(name, GPT2_SMALL)
    restored = plan_from_dict(plan_to_dict(plan))
    assert restored.name == plan.name
    assert restored.dims == plan.dims
    assert restored.per_target == dict(plan.per_target)
    assert report(restored).params_total == report(plan).params_total

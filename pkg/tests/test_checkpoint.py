import json

import numpy as np
import pytest

from kadapters.adapters import (
    AdapterScheme,
    SchemeKind,
    init_adapter,
    named_trainable_params,
    randomize_factors,
)
from kadapters.attention import AttentionWeights
from kadapters.checkpoint import (
    load_adapter_state,
    load_attention_weights,
    save_adapter_state,
    save_attention_weights,
)
from kadapters.errors import CheckpointError
from kadapters.harness import toy_dims

ALL_SCHEMES = [
    AdapterScheme(SchemeKind.LORA, rank_shared=3),
    AdapterScheme(SchemeKind.KERNEL_WISE, rank_head=2),
    AdapterScheme(SchemeKind.KERNEL_WISE_LITE, rank_head=2),
    AdapterScheme(SchemeKind.KERNEL_MIX, rank_shared=2, rank_head=1),
    AdapterScheme(SchemeKind.KERNEL_MIX_LITE, rank_shared=2, rank_head=1, include_bias=False),
]


@pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=lambda s: s.kind.value)
@pytest.mark.parametrize("target", ["q", "v", "o"])
def test_adapter_round_trip_bitwise(tmp_path, scheme, target):
    dims = toy_dims()
    state = randomize_factors(init_adapter(scheme, target, dims, seed=[5, 1]), seed=6)
    path = tmp_path / "state.ckpt"
    save_adapter_state(path, state)
    restored = load_adapter_state(path)
    assert restored.scheme == state.scheme
    assert restored.target == state.target
    assert restored.dims == state.dims
    assert restored.init_seed == state.init_seed
    for (name_a, node_a), (name_b, node_b) in zip(named_trainable_params(state),
                                                  named_trainable_params(restored)):
        assert name_a == name_b
        assert np.array_equal(node_a.value, node_b.value)


def test_save_is_deterministic(tmp_path):
    dims = toy_dims()
    state = init_adapter(ALL_SCHEMES[0], "q", dims, seed=1)
    save_adapter_state(tmp_path / "a.ckpt", state)
    save_adapter_state(tmp_path / "b.ckpt", state)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_payload_rejected(tmp_path):
    dims = toy_dims()
    state = init_adapter(ALL_SCHEMES[1], "v", dims, seed=2)
    path = tmp_path / "state.ckpt"
    save_adapter_state(path, state)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_adapter_state(path)


def test_trailing_bytes_rejected(tmp_path):
    dims = toy_dims()
    state = init_adapter(ALL_SCHEMES[0], "q", dims, seed=3)
    path = tmp_path / "state.ckpt"
    save_adapter_state(path, state)
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_adapter_state(path)


def test_header_shape_conflict_names_matrix(tmp_path):
    dims = toy_dims()
    state = init_adapter(ALL_SCHEMES[0], "q", dims, seed=4)
    path = tmp_path / "state.ckpt"
    save_adapter_state(path, state)
    raw = path.read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline])
    header["matrices"][0]["rows"] += 1
    path.write_bytes(json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
                     + raw[newline:])
    with pytest.raises(CheckpointError, match="shared_B"):
        load_adapter_state(path)


def test_non_checkpoint_file_rejected(tmp_path):
    path = tmp_path / "nope.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(CheckpointError):
        load_adapter_state(path)
    path.write_bytes(b"no header at all")
    with pytest.raises(CheckpointError):
        load_adapter_state(path)


def test_attention_weights_round_trip(tmp_path):
    dims = toy_dims()
    weights = AttentionWeights.random(dims, seed=9)
    path = tmp_path / "weights.ckpt"
    save_attention_weights(path, weights, dims)
    restored, restored_dims = load_attention_weights(path)
    assert restored_dims == dims
    for name in AttentionWeights.NAMES:
        assert np.array_equal(getattr(restored, name).value, getattr(weights, name).value)


def test_kind_mismatch_rejected(tmp_path):
    dims = toy_dims()
    weights = AttentionWeights.random(dims, seed=9)
    path = tmp_path / "weights.ckpt"
    save_attention_weights(path, weights, dims)
    with pytest.raises(CheckpointError, match="adapter-state"):
        load_adapter_state(path)

"""Checkpoint files: a one-line JSON header plus raw float64 payloads.

Layout: the first line is compact JSON (sorted keys, no embedded newlines)
describing what follows -- scheme/target/dims for adapter states, the weight
list for attention weights, and per-matrix shapes in declaration order. The
remainder of the file is the little-endian float64 row-major payload of each
matrix, concatenated in that same order. Round-trips are bit-exact.

Loads are all-or-nothing: any header/payload mismatch raises CheckpointError
naming the offending matrix, and no partially filled object escapes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapters import AdapterScheme, AdapterState, named_trainable_params
from .attention import AttentionWeights, ModelDims
from .autodiff import leaf
from .errors import CheckpointError

FORMAT_NAME = "kadapters-checkpoint"
FORMAT_VERSION = 1
_FLOAT = np.dtype("<f8")


def _write(path, header: dict, matrices: list[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    payload = b"".join(np.ascontiguousarray(m, dtype=np.float64).astype(_FLOAT).tobytes()
                       for m in matrices)
    Path(path).write_bytes(blob + payload)


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
    return header, raw[newline + 1:]


def _split_payload(payload: bytes, entries: list[dict], path) -> list[np.ndarray]:
    matrices = []
    offset = 0
    for entry in entries:
        name, rows, cols = entry["name"], int(entry["rows"]), int(entry["cols"])
        nbytes = rows * cols * _FLOAT.itemsize
        chunk = payload[offset:offset + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(
                f"{path}: payload truncated inside matrix {name!r}"
                f" (need {nbytes} bytes, have {len(chunk)})"
            )
        matrices.append(
            np.frombuffer(chunk, dtype=_FLOAT).astype(np.float64).reshape(rows, cols)
        )
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(
            f"{path}: {len(payload) - offset} trailing bytes beyond declared matrices"
        )
    return matrices


def save_adapter_state(path, state: AdapterState) -> None:
    named = named_trainable_params(state)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": "adapter-state",
        "scheme": state.scheme.to_dict(),
        "target": state.target,
        "dims": state.dims.to_dict(),
        "seed_lineage": list(state.init_seed),
        "matrices": [
            {"name": name, "rows": node.value.shape[0], "cols": node.value.shape[1]}
            for name, node in named
        ],
    }
    _write(path, header, [node.value for _, node in named])


def load_adapter_state(path, trainable: bool = True) -> AdapterState:
    header, payload = _read(path)
    if header.get("kind") != "adapter-state":
        raise CheckpointError(f"{path}: expected an adapter-state checkpoint")
    scheme = AdapterScheme.from_dict(header["scheme"])
    dims = ModelDims.from_dict(header["dims"])
    target = header["target"]
    state = AdapterState(
        scheme=scheme, target=target, dims=dims,
        init_seed=tuple(int(s) for s in header.get("seed_lineage", ())),
    )
    d, p, n_heads = dims.model_dim, dims.head_dim, dims.n_heads
    expected: list[tuple[str, tuple[int, int]]] = []
    if scheme.rank_shared:
        expected.append(("shared_B", (d, scheme.rank_shared)))
        expected.extend((f"shared_A[{h}]", (scheme.rank_shared, p)) for h in range(n_heads))
    if scheme.rank_head:
        b_rows = p if scheme.uses_lite_basis else d
        expected.extend((f"head_B[{h}]", (b_rows, scheme.rank_head)) for h in range(n_heads))
        expected.extend((f"head_A[{h}]", (scheme.rank_head, p)) for h in range(n_heads))
    if scheme.include_bias:
        expected.append(("bias_delta", (1, d)))

    entries = header.get("matrices", [])
    if len(entries) != len(expected):
        raise CheckpointError(
            f"{path}: header lists {len(entries)} matrices, scheme requires {len(expected)}"
        )
    for entry, (name, shape) in zip(entries, expected):
        declared = (int(entry["rows"]), int(entry["cols"]))
        if entry["name"] != name or declared != shape:
            raise CheckpointError(
                f"{path}: matrix {entry['name']!r} {declared} does not match"
                f" expected {name!r} {shape}"
            )
    matrices = _split_payload(payload, entries, path)

    cursor = iter(matrices)
    if scheme.rank_shared:
        state.shared_B = leaf(next(cursor), requires_grad=trainable)
        state.shared_A_heads = [leaf(next(cursor), requires_grad=trainable)
                                for _ in range(n_heads)]
    if scheme.rank_head:
        state.head_B = [leaf(next(cursor), requires_grad=trainable) for _ in range(n_heads)]
        state.head_A = [leaf(next(cursor), requires_grad=trainable) for _ in range(n_heads)]
    if scheme.include_bias:
        state.bias_delta = leaf(next(cursor), requires_grad=trainable)
    return state


def save_attention_weights(path, weights: AttentionWeights, dims: ModelDims) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": "attention-weights",
        "dims": dims.to_dict(),
        "matrices": [
            {"name": name, "rows": getattr(weights, name).value.shape[0],
             "cols": getattr(weights, name).value.shape[1]}
            for name in AttentionWeights.NAMES
        ],
    }
    _write(path, header, [getattr(weights, name).value for name in AttentionWeights.NAMES])


def load_attention_weights(path, trainable: bool = False) -> tuple[AttentionWeights, ModelDims]:
    header, payload = _read(path)
    if header.get("kind") != "attention-weights":
        raise CheckpointError(f"{path}: expected an attention-weights checkpoint")
    dims = ModelDims.from_dict(header["dims"])
    d = dims.model_dim
    expected = {name: ((d, d) if name.startswith("w_") else (1, d))
                for name in AttentionWeights.NAMES}
    entries = header.get("matrices", [])
    if [e["name"] for e in entries] != list(AttentionWeights.NAMES):
        raise CheckpointError(f"{path}: unexpected weight list {[e['name'] for e in entries]}")
    for entry in entries:
        declared = (int(entry["rows"]), int(entry["cols"]))
        if declared != expected[entry["name"]]:
            raise CheckpointError(
                f"{path}: matrix {entry['name']!r} {declared} does not match"
                f" expected {expected[entry['name']]}"
            )
    matrices = _split_payload(payload, entries, path)
    arrays = dict(zip(AttentionWeights.NAMES, matrices))
    return AttentionWeights.from_arrays(arrays, trainable=trainable), dims

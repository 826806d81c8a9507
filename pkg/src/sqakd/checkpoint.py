"""Checkpoint persistence: JSON manifest plus raw little-endian float blobs.

A checkpoint is a directory:

    manifest.json       topology, quantizer configuration, param index
    params/<name>.bin   one raw little-endian blob per parameter

Round-trips are bit-exact; loading validates blob shapes against the
manifest topology.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import network as N
from . import quantizers as q
from .errors import ConfigError, DataError
from .tensor import Tensor

FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def _spec_descriptor(spec: q.QuantizerSpec) -> dict:
    if spec.rule.kind == q.RuleKind.CUSTOM:
        raise ConfigError("custom backward rules are not serializable to a checkpoint")
    return {
        "kind": spec.kind.value,
        "target": spec.target.value,
        "bits": spec.bits,
        "rule": spec.rule.kind.value,
        "delta": spec.rule.delta,
        "initialized": spec.initialized,
    }


def _spec_from_descriptor(d: dict) -> q.QuantizerSpec:
    rule = q.BackwardRule(q.RuleKind(d["rule"]), delta=d["delta"])
    return q.make_quantizer(d["kind"], d["target"], d["bits"], rule)


def _set_spec_params(spec: q.QuantizerSpec, values: dict) -> None:
    if spec.kind in (q.QuantKind.PACT, q.QuantKind.LSQ):
        t = Tensor(np.asarray(values["p1"], dtype=spec.dtype), requires_grad=True)
        spec.clip_params["p1"] = t
        spec.round_params["q1"] = t
    elif spec.kind == q.QuantKind.EWGS:
        spec.clip_params["p1"] = Tensor(np.asarray(values["p1"], dtype=spec.dtype), requires_grad=True)
        spec.clip_params["p2"] = Tensor(np.asarray(values["p2"], dtype=spec.dtype), requires_grad=True)


def _layer_descriptor(layer) -> dict:
    d = layer.descriptor()
    if isinstance(layer, (N.Dense, N.Conv2d)):
        d["weight_q"] = _spec_descriptor(layer.weight_q) if layer.weight_q else None
        d["act_q"] = _spec_descriptor(layer.act_q) if layer.act_q else None
    return d


def _layer_from_descriptor(d: dict):
    kind = d["kind"]
    if kind == "dense":
        layer = N.Dense(d["in_dim"], d["out_dim"])
    elif kind == "conv2d":
        layer = N.Conv2d(d["in_channels"], d["out_channels"], d["kernel_size"], d["stride"], d["padding"])
    elif kind == "relu":
        return N.ReLU()
    elif kind == "flatten":
        return N.Flatten()
    else:
        raise DataError(f"unknown layer kind '{kind}' in checkpoint")
    if d.get("weight_q"):
        layer.weight_q = _spec_from_descriptor(d["weight_q"])
    if d.get("act_q"):
        layer.act_q = _spec_from_descriptor(d["act_q"])
    return layer


def save_checkpoint(net: N.Network, path, seed: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)

    params = []
    for name, t in net.parameters():
        dtype_name = str(t.data.dtype)
        if dtype_name not in _DTYPE_CODES:
            raise ConfigError(f"cannot persist parameter '{name}' of dtype {dtype_name}")
        params.append({"name": name, "shape": list(t.data.shape), "dtype": dtype_name})
        blob = np.ascontiguousarray(t.data.astype(_DTYPE_CODES[dtype_name])).tobytes()
        (path / "params" / f"{name}.bin").write_bytes(blob)

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "scalar_precision": "float32",
        "topology": [_layer_descriptor(l) for l in net.layers],
        "params": params,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {manifest.get('format_version')}")

    net = N.Network([_layer_from_descriptor(d) for d in manifest["topology"]])

    state = {}
    for entry in manifest["params"]:
        blob_path = path / "params" / f"{entry['name']}.bin"
        if not blob_path.exists():
            raise DataError(f"checkpoint blob missing: {blob_path}")
        code = _DTYPE_CODES[entry["dtype"]]
        arr = np.frombuffer(blob_path.read_bytes(), dtype=code).reshape(entry["shape"])
        state[entry["name"]] = arr.astype(entry["dtype"])

    # Quantizer scalars live in the same namespace; create their tensors
    # before pushing state into the network.
    for prefix, spec in net.quantizer_specs():
        values = {k.split(".")[-1]: v for k, v in state.items() if k.startswith(prefix + ".")}
        if values:
            _set_spec_params(spec, values)

    net.load_param_state(state)
    return net, manifest


def materialize_quantized(net: N.Network) -> N.Network:
    """Replace latent weights with their quantized values, in place.

    After materialization the weights sit exactly on their quantizer's grid,
    so quantizing them again reproduces them; interval-based weight
    quantizers are re-anchored to the grid's natural clip range to keep that
    fixed-point property.
    """
    for _, layer in net.parametric_layers():
        if layer.weight_q is None:
            continue
        layer.W.data = q.quantize_array(layer.W.data, layer.weight_q)
        if layer.weight_q.kind == q.QuantKind.EWGS:
            dtype = layer.weight_q.dtype
            _set_spec_params(layer.weight_q, {"p1": np.asarray(-1.0, dtype), "p2": np.asarray(1.0, dtype)})
    return net


def export_quantized(src_path, dst_path) -> Path:
    """Materialize a checkpoint's quantized weights into a new checkpoint."""
    net, manifest = load_checkpoint(src_path)
    materialize_quantized(net)
    extra = dict(manifest.get("extra", {}))
    extra["quantized_export"] = True
    return save_checkpoint(net, dst_path, seed=manifest.get("seed", 0), extra=extra)

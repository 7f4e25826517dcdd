"""JSON checkpoints with parameters stored as base64 little-endian float32."""
from __future__ import annotations

import base64
import json

import numpy as np

from .network import Network

FORMAT_VERSION = 1


def encode_tensor(name, arr):
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {"name": name, "shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_tensor(entry):
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)


def to_json(net: Network, model_kind: str, rng_seed: int, epoch: int = 0, metrics=None,
            model_config=None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "model_config": model_config,
        "input_shape": list(net.input_shape),
        "layer_specs": net.layer_specs(),
        "rng_seed": rng_seed,
        "epoch": epoch,
        "metrics": metrics or {},
        "parameters": [encode_tensor(k, v) for k, v in net.named_params()],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def from_json(text: str) -> tuple[Network, dict]:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    net = Network(doc["layer_specs"], doc["input_shape"], seed=doc["rng_seed"])
    net.set_params({e["name"]: decode_tensor(e) for e in doc["parameters"]})
    return net, doc

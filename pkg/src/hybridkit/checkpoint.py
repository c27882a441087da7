"""Self-describing binary checkpoints.

Layout: 8-byte magic ``HYPENET1``, an unsigned little-endian 64-bit header
length, a UTF-8 JSON header (config plus a tensor index of name/dtype/shape/
offset/length), then the raw little-endian tensor payload.  Offsets are
ascending, non-overlapping, and cover the payload exactly; loading what was
saved reproduces every tensor bit for bit (tensors are stored in their
native precision, recorded per entry by the dtype code).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import (LayerWeights, MixerWeights, MlpWeights, Model, ModelConfig)
from .positional import RopeParams, ScaleBase
from .tensor import Tensor

MAGIC = b"HYPENET1"

_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(RuntimeError):
    """Malformed checkpoint file."""


def save_tensors(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint with an arbitrary JSON-serializable config block."""
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "length": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"config": config, "tensors": index}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (config, name -> array)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    header_end = len(MAGIC) + 8 + header_len
    if header_len == 0 or header_end > len(raw):
        raise CheckpointError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: undecodable header ({e})") from None
    payload = raw[header_end:]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header["tensors"]:
        if entry["offset"] != expected_offset:
            raise CheckpointError(f"{path}: tensor offsets must be ascending and "
                                  f"gap-free (at {entry['name']!r})")
        dtype = _DTYPE_CODES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {entry['dtype']!r}")
        end = entry["offset"] + entry["length"]
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']!r}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=dtype)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        expected_offset = end
    if expected_offset != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload) - expected_offset} "
                              f"trailing bytes not covered by the index")
    return header["config"], tensors


# --------------------------------------------------------------------------
# model (de)serialization

def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["rope"] = {"theta": cfg.rope.theta, "head_dim": cfg.rope.head_dim}
    d["scale_base"] = None if cfg.scale_base is None else cfg.scale_base.a
    d["I_attn"] = list(cfg.I_attn)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    kw = dict(d)
    kw["rope"] = RopeParams(**d["rope"])
    kw["scale_base"] = None if d["scale_base"] is None else ScaleBase(d["scale_base"])
    kw["I_attn"] = tuple(d["I_attn"])
    return ModelConfig(**kw)


def save_model(path, model: Model) -> None:
    tensors = {name: t.data for name, t in model.named_parameters()}
    config = {"kind": "model", "model": config_to_dict(model.cfg),
              "layer_kinds": [lw.mixer_kind for lw in model.layers]}
    save_tensors(path, config, tensors)


def _mixer_from(tensors: dict, prefix: str, kind: str, cfg: ModelConfig) -> MixerWeights:
    attn = kind == "attention"
    n_kv = cfg.n_kv_heads if attn else cfg.n_h
    get = lambda name: tensors.get(prefix + name)
    wrap = lambda arr: None if arr is None else Tensor(arr, requires_grad=True,
                                                       dtype=arr.dtype)
    return MixerWeights(
        n_h=cfg.n_h, n_kv_heads=n_kv, d_h=cfg.d_h,
        w_q=wrap(get("w_q")), w_k=wrap(get("w_k")),
        w_v=wrap(get("w_v")), w_o=wrap(get("w_o")),
        w_z=wrap(get("w_z")), w_g=wrap(get("w_g")),
        qk_gain_q=wrap(get("qk_gain_q")), qk_gain_k=wrap(get("qk_gain_k")),
        out_gain=wrap(get("out_gain")),
    )


def load_model(path) -> Model:
    config, tensors = load_tensors(path)
    if config.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = config_from_dict(config["model"])
    kinds = config["layer_kinds"]
    wrap = lambda arr: Tensor(arr, requires_grad=True, dtype=arr.dtype)
    layers = []
    for l in range(cfg.L):
        p = f"layers.{l}."
        layers.append(LayerWeights(
            mixer_kind=kinds[l],
            mixer=_mixer_from(tensors, p + "mixer.", kinds[l], cfg),
            pre_mixer_gain=wrap(tensors[p + "pre_mixer_gain"]),
            pre_mlp_gain=wrap(tensors[p + "pre_mlp_gain"]),
            mlp=MlpWeights(wrap(tensors[p + "mlp.w_gate"]),
                           wrap(tensors[p + "mlp.w_up"]),
                           wrap(tensors[p + "mlp.w_down"])),
        ))
    unembed = wrap(tensors["unembed"]) if "unembed" in tensors else None
    return Model(cfg, wrap(tensors["embed"]), layers, wrap(tensors["final_gain"]),
                 unembed)


def save_mixer(path, mixer: MixerWeights, meta: dict | None = None) -> None:
    """Persist one mixer's weights (stage-1 per-layer artifacts)."""
    config = {"kind": "mixer", "n_h": mixer.n_h, "n_kv_heads": mixer.n_kv_heads,
              "d_h": mixer.d_h, "meta": meta or {}}
    save_tensors(path, config, {name: t.data for name, t in mixer.named()})


def load_mixer(path) -> MixerWeights:
    config, tensors = load_tensors(path)
    if config.get("kind") != "mixer":
        raise CheckpointError(f"{path}: not a mixer checkpoint")
    wrap = lambda arr: None if arr is None else Tensor(arr, requires_grad=True,
                                                       dtype=arr.dtype)
    return MixerWeights(
        n_h=config["n_h"], n_kv_heads=config["n_kv_heads"], d_h=config["d_h"],
        w_q=wrap(tensors["w_q"]), w_k=wrap(tensors["w_k"]),
        w_v=wrap(tensors["w_v"]), w_o=wrap(tensors["w_o"]),
        w_z=wrap(tensors.get("w_z")), w_g=wrap(tensors.get("w_g")),
        qk_gain_q=wrap(tensors.get("qk_gain_q")),
        qk_gain_k=wrap(tensors.get("qk_gain_k")),
        out_gain=wrap(tensors.get("out_gain")),
    )


def cast_model(model: Model, dtype) -> Model:
    """Re-home all parameters in `dtype` (for cross-precision loading)."""
    dtype = np.dtype(dtype)
    for _, t in model.named_parameters():
        t.data = t.data.astype(dtype, copy=False)
    return model

"""
Sequential networks with named skip connections, plus the ModelParams file format.

A model directory holds ``model.json`` (architecture, tensor index, sha256 of
the parameter blob, free-form metadata) and ``params.f32`` (every parameter and
running buffer, little-endian float32, concatenated in index order).
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pydantic
from pydantic import BaseModel, Field, model_validator

from ..data.storage import read_f32_blob, write_f32_blob
from ..errors import CorruptionError, ModelError, StructuralError, UsageError, ValidationError
from .layers import BatchNorm, Concat, Conv2d, Layer, MaxPool2, ReLU, Sigmoid, UpsampleNearest2

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
PARAMS_FILE = "params.f32"

LayerKind = Literal["conv2d", "batch_norm", "relu", "max_pool", "upsample_nearest", "concat", "sigmoid"]
Mode = Literal["train", "eval"]


class LayerSpec(BaseModel):
    kind: LayerKind
    name: str = Field(min_length=1)
    out_channels: int | None = Field(default=None, ge=1)
    kernel: int = Field(default=3, ge=1)
    bias: bool = True
    skip: str | None = None

    @model_validator(mode="after")
    def _check_kind_fields(self) -> LayerSpec:
        if self.kind == "conv2d" and self.out_channels is None:
            raise ValueError(f"conv2d layer '{self.name}' needs out_channels")
        if self.kind == "conv2d" and self.kernel % 2 == 0:
            raise ValueError(f"conv2d layer '{self.name}' needs an odd kernel, got {self.kernel}")
        if self.kind == "concat" and not self.skip:
            raise ValueError(f"concat layer '{self.name}' needs a skip reference")
        return self


class NetworkSpec(BaseModel):
    in_channels: int = Field(default=1, ge=1)
    layers: list[LayerSpec]
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_references(self) -> NetworkSpec:
        seen: set[str] = set()
        for layer in self.layers:
            if layer.name in seen:
                raise ValueError(f"duplicate layer name '{layer.name}'")
            if layer.kind == "concat" and layer.skip not in seen:
                raise ValueError(f"concat layer '{layer.name}' refers to '{layer.skip}', which is not an earlier layer")
            seen.add(layer.name)
        return self

    @property
    def pooling_levels(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "max_pool")


def _build_layer(spec: LayerSpec, index: int, in_channels: int, seed: int, dtype: Any) -> Layer:
    match spec.kind:
        case "conv2d":
            assert spec.out_channels is not None
            rng = np.random.default_rng([seed, index])
            return Conv2d(spec.name, in_channels, spec.out_channels, spec.kernel, bias=spec.bias, rng=rng, dtype=dtype)
        case "batch_norm":
            return BatchNorm(spec.name, in_channels, dtype=dtype)
        case "relu":
            return ReLU(spec.name)
        case "max_pool":
            return MaxPool2(spec.name)
        case "upsample_nearest":
            return UpsampleNearest2(spec.name)
        case "concat":
            assert spec.skip is not None
            return Concat(spec.name, spec.skip)
        case "sigmoid":
            return Sigmoid(spec.name)
    raise StructuralError(f"unknown layer kind {spec.kind!r}")


class Network:
    """Layers built from a ``NetworkSpec``; parameters are addressed as ``"<layer>.<param>"``."""

    def __init__(self, spec: NetworkSpec, *, dtype: Any = np.float32) -> None:
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = []
        channels: dict[str, int] = {}
        current = spec.in_channels
        for index, layer_spec in enumerate(spec.layers):
            layer = _build_layer(layer_spec, index, current, spec.seed, self.dtype)
            if isinstance(layer, Conv2d):
                current = layer.out_channels
            elif isinstance(layer, Concat):
                current += channels[layer.skip]
            channels[layer_spec.name] = current
            self.layers.append(layer)
        self.out_channels = current
        self._skip_sources = {layer.skip for layer in self.layers if isinstance(layer, Concat)}
        self._trained_forward = False

    def forward(self, x: np.ndarray, mode: Mode = "eval") -> np.ndarray:
        if x.ndim != 4:
            raise StructuralError(f"network input must have 4 axes, got shape {x.shape}")
        if x.shape[1] != self.spec.in_channels:
            raise StructuralError(f"network expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        divisor = 2**self.spec.pooling_levels
        if x.shape[2] % divisor or x.shape[3] % divisor:
            raise StructuralError(f"spatial dims {x.shape[2:]} must be multiples of {divisor}")
        train = mode == "train"
        out = np.asarray(x, dtype=self.dtype)
        saved: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if isinstance(layer, Concat):
                out = layer.forward_pair(out, saved[layer.skip], train)
            else:
                out = layer.forward(out, train)
            if layer.name in self._skip_sources:
                saved[layer.name] = out
        self._trained_forward = train
        if not train:
            for layer in self.layers:
                layer.clear_cache()
        return out

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Fill every layer's ``grads`` and return the gradient with respect to the input."""
        if not self._trained_forward:
            raise UsageError("backward requires a preceding train-mode forward")
        grad = np.asarray(upstream, dtype=self.dtype)
        pending: dict[str, np.ndarray] = {}
        for layer in reversed(self.layers):
            if layer.name in pending:
                grad = grad + pending.pop(layer.name)
            if isinstance(layer, Concat):
                grad, skip_grad = layer.backward_pair(grad)
                pending[layer.skip] = pending.get(layer.skip, 0) + skip_grad
            else:
                grad = layer.backward(grad)
        return grad

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        for layer in self.layers:
            for key, value in layer.params.items():
                grads[f"{layer.name}.{key}"] = layer.grads.get(key, np.zeros_like(value))
        return grads

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.buffers.items()}

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        self._assign(values, "params")

    def set_buffers(self, values: dict[str, np.ndarray]) -> None:
        self._assign(values, "buffers")

    def _assign(self, values: dict[str, np.ndarray], attr: str) -> None:
        by_name = {layer.name: layer for layer in self.layers}
        for key, value in values.items():
            layer_name, _, slot = key.rpartition(".")
            layer = by_name.get(layer_name)
            store = getattr(layer, attr) if layer is not None else None
            if store is None or slot not in store:
                raise StructuralError(f"unknown {attr[:-1]} '{key}'")
            if store[slot].shape != np.shape(value):
                raise StructuralError(f"'{key}' has shape {np.shape(value)}, expected {store[slot].shape}")
            store[slot] = np.asarray(value, dtype=self.dtype).copy()

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))

    def save(self, directory: Path | str, metadata: dict[str, Any] | None = None) -> Path:
        target = Path(directory)
        target.mkdir(parents=True, exist_ok=True)
        index: list[dict[str, Any]] = []
        chunks: list[np.ndarray] = []
        offset = 0
        for group, tensors in (("param", self.parameters()), ("buffer", self.buffers())):
            for name, value in tensors.items():
                index.append({"name": name, "group": group, "shape": list(value.shape), "offset": offset})
                chunks.append(np.asarray(value, dtype=np.float32).ravel())
                offset += value.size
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
        write_f32_blob(target / PARAMS_FILE, blob)
        digest = hashlib.sha256((target / PARAMS_FILE).read_bytes()).hexdigest()
        descriptor = {
            "spec": self.spec.model_dump(mode="json"),
            "tensors": index,
            "count": int(offset),
            "sha256": digest,
            "metadata": metadata or {},
        }
        (target / MODEL_FILE).write_text(json.dumps(descriptor, indent=2, sort_keys=True), encoding="utf-8")
        logger.info("Saved model to %s (%s parameters)", target, self.parameter_count())
        return target

    @classmethod
    def load(cls, directory: Path | str, *, dtype: Any = np.float32) -> tuple[Network, dict[str, Any]]:
        source = Path(directory)
        model_path, params_path = source / MODEL_FILE, source / PARAMS_FILE
        if not model_path.is_file() or not params_path.is_file():
            raise ModelError(f"no trained model at {source}")
        try:
            descriptor = json.loads(model_path.read_text(encoding="utf-8"))
            spec = NetworkSpec.model_validate(descriptor["spec"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise CorruptionError(f"{model_path}: unreadable model descriptor") from exc
        except pydantic.ValidationError as exc:
            raise ValidationError(f"{model_path}: invalid architecture: {exc}") from exc
        digest = hashlib.sha256(params_path.read_bytes()).hexdigest()
        if digest != descriptor.get("sha256"):
            raise CorruptionError(f"{params_path}: content hash mismatch")
        blob = read_f32_blob(params_path, int(descriptor["count"]))
        net = cls(spec, dtype=dtype)
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        for entry in descriptor["tensors"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            value = blob[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
            (params if entry["group"] == "param" else buffers)[entry["name"]] = value
        net.set_parameters(params)
        net.set_buffers(buffers)
        return net, dict(descriptor.get("metadata", {}))

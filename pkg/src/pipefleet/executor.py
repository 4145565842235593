"""Pluggable stage executors and the deterministic affine reference executor.

Stage artefacts are small JSON blobs. The affine artefact materializes its
weight matrix and bias from a splitmix64 stream so any implementation of the
generator reproduces bit-identical parameters, and fixes the float32
summation order (row-major products, sequential accumulation) so a chained
distributed run can be compared bitwise against a single-process run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .canonical import canonical_bytes
from .transport import Tensor

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MIX_1 = 0xBF58476D1CE4E5B9
_MIX_2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """First `count` outputs of a splitmix64 generator as uint64.

    The i-th output mixes seed + (i+1)*gamma, so the whole stream is a
    closed form over the index and vectorizes cleanly.
    """
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = (np.uint64(seed & _MASK64) + idx * np.uint64(_SPLITMIX_GAMMA)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_2)
    z = z ^ (z >> np.uint64(31))
    return z


def splitmix64_unit_floats(seed: int, count: int) -> np.ndarray:
    """Stream mapped to float64 in [0, 1) using the top 53 bits."""
    z = splitmix64_stream(seed, count)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def affine_parameters(seed: int, in_dim: int, out_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (A, b): A is out_dim x in_dim, values in [-0.1, 0.1].

    The stream lays out A row-major first, then b; both float32.
    """
    u = splitmix64_unit_floats(seed, out_dim * in_dim + out_dim)
    scaled = (u * 0.2 - 0.1).astype(np.float32)
    matrix = scaled[: out_dim * in_dim].reshape(out_dim, in_dim)
    bias = scaled[out_dim * in_dim :]
    return matrix, bias


def _sequential_matvec_f32(matrix: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Row-major dot products with strictly sequential float32 accumulation.

    cumsum is sequential by definition (each prefix depends on the previous),
    which pins the rounding order without a Python-level loop.
    """
    products = matrix * vec[np.newaxis, :]
    return np.cumsum(products, axis=1, dtype=np.float32)[:, -1]


class StageExecutor:
    """Executes one stage artefact on a decoded input tensor."""

    def run(self, tensor: Tensor) -> Tensor:
        raise NotImplementedError


ACTIVATION_TANH = "tanh"
ACTIVATION_NONE = "none"


@dataclass(frozen=True, slots=True)
class AffineStageArtefact:
    """Serialized form of one affine stage: seed, dims and activation."""

    seed: int
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    activation: str
    memory_footprint_bytes: int

    def __post_init__(self) -> None:
        if self.activation not in (ACTIVATION_TANH, ACTIVATION_NONE):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "output_shape", tuple(int(d) for d in self.output_shape))

    def to_blob(self) -> bytes:
        return canonical_bytes(
            {
                "kind": "affine",
                "seed": self.seed,
                "input_shape": list(self.input_shape),
                "output_shape": list(self.output_shape),
                "activation": self.activation,
                "memory_footprint_bytes": self.memory_footprint_bytes,
            }
        )


class AffineStageExecutor(StageExecutor):
    """y = A.x + b in float32, with tanh on intermediate stages.

    Inputs are flattened row-major and cast to float32; the output is
    reshaped to the artefact's output shape.
    """

    def __init__(self, artefact: AffineStageArtefact):
        self.artefact = artefact
        in_dim = 1
        for d in artefact.input_shape:
            in_dim *= d
        out_dim = 1
        for d in artefact.output_shape:
            out_dim *= d
        self.matrix, self.bias = affine_parameters(artefact.seed, in_dim, out_dim)

    def run(self, tensor: Tensor) -> Tensor:
        if tuple(tensor.shape) != self.artefact.input_shape:
            raise ValueError(
                f"input shape {list(tensor.shape)} does not match artefact "
                f"input shape {list(self.artefact.input_shape)}"
            )
        vec = tensor.to_numpy().reshape(-1).astype(np.float32)
        out = _sequential_matvec_f32(self.matrix, vec) + self.bias
        if self.artefact.activation == ACTIVATION_TANH:
            out = np.tanh(out)
        out = out.astype(np.float32).reshape(self.artefact.output_shape)
        return Tensor.from_numpy(out)


class IdentityStageExecutor(StageExecutor):
    """Unit transform; the output tensor equals the input tensor."""

    def __init__(self, input_shape: tuple[int, ...]):
        self.input_shape = tuple(input_shape)

    def run(self, tensor: Tensor) -> Tensor:
        return tensor


def parse_artefact_blob(blob: bytes) -> dict:
    obj = json.loads(blob.decode("utf-8"))
    if "kind" not in obj:
        raise ValueError("artefact blob missing 'kind'")
    return obj


def executor_from_blob(blob: bytes) -> StageExecutor:
    """Build an executor session from artefact bytes."""
    obj = parse_artefact_blob(blob)
    kind = obj["kind"]
    if kind == "affine":
        artefact = AffineStageArtefact(
            seed=int(obj["seed"]),
            input_shape=tuple(obj["input_shape"]),
            output_shape=tuple(obj["output_shape"]),
            activation=str(obj["activation"]),
            memory_footprint_bytes=int(obj.get("memory_footprint_bytes", 1)),
        )
        return AffineStageExecutor(artefact)
    if kind == "identity":
        return IdentityStageExecutor(tuple(obj["input_shape"]))
    raise ValueError(f"unknown artefact kind {kind!r}")


def blob_footprint_bytes(blob: bytes) -> int:
    obj = parse_artefact_blob(blob)
    return int(obj.get("memory_footprint_bytes", 1))


def run_chain(blobs: list[bytes], tensor: Tensor) -> Tensor:
    """Single-process reference: run every stage in order on one host."""
    current = tensor
    for blob in blobs:
        current = executor_from_blob(blob).run(current)
    return current

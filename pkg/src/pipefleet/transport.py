"""Activation transport: self-describing compressed envelopes plus routing.

An activation travels either inline (envelope embedded in the message) or,
when its canonical encoding exceeds tau_ws, through a shared content-addressed
filesystem store with only the reference key on the wire. The envelope schema
is codec-agnostic; zlib (RFC 1950, default level) and the identity codec are
implemented.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .canonical import canonical_bytes, sha256_hex
from .errors import (
    Base64Error,
    DecompressError,
    HashMismatch,
    LengthMismatch,
    MissingKey,
    StoreWriteError,
)

DTYPE_SIZES = {"float32": 4, "int64": 8}
_NUMPY_DTYPES = {"float32": np.dtype("<f4"), "int64": np.dtype("<i8")}

CODEC_ZLIB = "zlib"
CODEC_NONE = "none"


@dataclass(frozen=True, slots=True)
class Tensor:
    """Raw little-endian row-major tensor bytes with dtype/shape metadata."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if self.dtype not in DTYPE_SIZES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ValueError(f"shape must be positive ints, got {self.shape}")
        if len(self.data) != self.element_count * DTYPE_SIZES[self.dtype]:
            raise ValueError(
                f"data length {len(self.data)} does not match dtype/shape "
                f"({self.element_count} x {DTYPE_SIZES[self.dtype]} bytes)"
            )

    @property
    def element_count(self) -> int:
        count = 1
        for d in self.shape:
            count *= d
        return count

    @classmethod
    def from_numpy(cls, arr: np.ndarray) -> "Tensor":
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.int64:
            dtype = "int64"
        else:
            raise ValueError(f"unsupported numpy dtype {arr.dtype}")
        contiguous = np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[dtype])
        return cls(dtype=dtype, shape=tuple(arr.shape), data=contiguous.tobytes())

    def to_numpy(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=_NUMPY_DTYPES[self.dtype]).reshape(self.shape)


@dataclass(frozen=True, slots=True)
class PayloadEnvelope:
    """Self-describing activation payload: dtype, shape, codec, base64 data."""

    dtype: str
    shape: tuple[int, ...]
    compression: str
    data: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    def to_wire(self) -> dict:
        return {
            "compression": self.compression,
            "data": self.data,
            "dtype": self.dtype,
            "shape": list(self.shape),
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "PayloadEnvelope":
        return cls(
            dtype=str(obj["dtype"]),
            shape=tuple(obj["shape"]),
            compression=str(obj["compression"]),
            data=str(obj["data"]),
        )

    def canonical_bytes(self) -> bytes:
        return canonical_bytes(self.to_wire())

    def content_key(self) -> str:
        return sha256_hex(self.canonical_bytes())


@dataclass(frozen=True, slots=True)
class PayloadRouting:
    """Exactly one of an inline envelope or a store reference key."""

    inline: PayloadEnvelope | None = None
    store_ref: str | None = None

    def __post_init__(self) -> None:
        if (self.inline is None) == (self.store_ref is None):
            raise ValueError("exactly one of inline/store_ref must be set")

    def to_wire(self) -> dict:
        if self.inline is not None:
            return {"inline": self.inline.to_wire()}
        return {"store_ref": self.store_ref}

    @classmethod
    def from_wire(cls, obj: dict) -> "PayloadRouting":
        if "inline" in obj:
            return cls(inline=PayloadEnvelope.from_wire(obj["inline"]))
        return cls(store_ref=str(obj["store_ref"]))


class PayloadStore:
    """Content-addressed filesystem store holding canonical envelope bytes.

    Files live at ``<root>/<sha256-hex>.bin``; writes go to a temp file and
    are atomically renamed, so concurrent identical writes are benign.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.bin"

    def put(self, envelope: PayloadEnvelope) -> str:
        payload = envelope.canonical_bytes()
        key = sha256_hex(payload)
        path = self._path(key)
        if path.exists():
            return key
        try:
            fd, tmp_name = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as handle:
                    handle.write(payload)
                os.replace(tmp_name, path)
            finally:
                if os.path.exists(tmp_name):
                    os.unlink(tmp_name)
        except OSError as exc:
            raise StoreWriteError(f"cannot write payload {key}: {exc}") from exc
        return key

    def get(self, key: str) -> PayloadEnvelope:
        path = self._path(key)
        try:
            payload = path.read_bytes()
        except FileNotFoundError:
            raise MissingKey(f"no stored payload for key {key}") from None
        actual = sha256_hex(payload)
        if actual != key:
            raise HashMismatch(f"stored payload for {key} hashes to {actual}")
        return PayloadEnvelope.from_wire(json.loads(payload.decode("utf-8")))

    def has(self, key: str) -> bool:
        return self._path(key).exists()


def encode_payload(tensor: Tensor, codec: str = CODEC_ZLIB) -> PayloadEnvelope:
    """Encode a tensor into an envelope; decode inverts it bit-exactly."""
    if codec == CODEC_ZLIB:
        body = zlib.compress(tensor.data)
    elif codec == CODEC_NONE:
        body = tensor.data
    else:
        raise DecompressError(f"unsupported compression codec {codec!r}")
    return PayloadEnvelope(
        dtype=tensor.dtype,
        shape=tensor.shape,
        compression=codec,
        data=base64.b64encode(body).decode("ascii"),
    )


def decode_payload(envelope: PayloadEnvelope) -> Tensor:
    """Invert :func:`encode_payload`; corruption surfaces as typed errors."""
    try:
        body = base64.b64decode(envelope.data.encode("ascii"), validate=True)
    except (binascii.Error, ValueError, UnicodeEncodeError) as exc:
        raise Base64Error(f"invalid base64 payload data: {exc}") from exc

    if envelope.compression == CODEC_ZLIB:
        try:
            raw = zlib.decompress(body)
        except zlib.error as exc:
            raise DecompressError(f"zlib decompression failed: {exc}") from exc
    elif envelope.compression == CODEC_NONE:
        raw = body
    else:
        raise DecompressError(f"unsupported compression codec {envelope.compression!r}")

    if envelope.dtype not in DTYPE_SIZES:
        raise LengthMismatch(f"unknown dtype {envelope.dtype!r}")
    expected = DTYPE_SIZES[envelope.dtype]
    for d in envelope.shape:
        expected *= d
    if len(raw) != expected:
        raise LengthMismatch(
            f"decompressed to {len(raw)} bytes, dtype/shape require {expected}"
        )
    return Tensor(dtype=envelope.dtype, shape=envelope.shape, data=raw)


def envelope_size_bytes(envelope: PayloadEnvelope) -> int:
    """Payload size as compared against tau_ws: canonical envelope bytes."""
    return len(envelope.canonical_bytes())


def route_payload(envelope: PayloadEnvelope, tau_ws: int, store: PayloadStore) -> PayloadRouting:
    """Route inline when the canonical envelope fits tau_ws, else via store."""
    if tau_ws <= 0:
        raise ValueError("tau_ws must be > 0")
    if envelope_size_bytes(envelope) <= tau_ws:
        return PayloadRouting(inline=envelope)
    return PayloadRouting(store_ref=store.put(envelope))


def resolve_payload(routing: PayloadRouting, store: PayloadStore) -> PayloadEnvelope:
    if routing.inline is not None:
        return routing.inline
    return store.get(routing.store_ref)


def compression_ratio(raw_len: int, compressed_len: int) -> float:
    """Percentage saved: 100 * (1 - compressed/raw). Negative when inflated."""
    if raw_len <= 0:
        raise ValueError("raw_len must be > 0")
    return 100.0 * (1.0 - compressed_len / raw_len)


def envelope_compression_stats(envelope: PayloadEnvelope) -> tuple[int, int]:
    """(raw_bytes, encoded_bytes) for an envelope, from metadata alone."""
    raw = DTYPE_SIZES[envelope.dtype]
    for d in envelope.shape:
        raw *= d
    encoded = len(base64.b64decode(envelope.data.encode("ascii")))
    return raw, encoded

"""Canonical JSON encoding used for wire frames, store keys and size checks.

Canonical form: UTF-8, keys sorted lexicographically, no insignificant
whitespace. Every byte comparison in the system (tau_ws routing, store
content addressing, golden-file conformance) runs over these bytes.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_dumps(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()

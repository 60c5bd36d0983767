"""Wire codec: JSON prelude + "\n" + concatenated little-endian float32
payloads in the order declared by the prelude's "shapes" object.

This mirrors the client-side definition byte for byte; conformance is held
by shared fixtures in the test suites.
"""

from __future__ import annotations

import json

import numpy as np

MAX_ELEMENTS = 1 << 28


class ProtocolError(Exception):
    pass


def encode_message(meta: dict, arrays: dict) -> bytes:
    prelude = dict(meta)
    shapes = {}
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        shapes[name] = [int(s) for s in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    prelude["shapes"] = shapes
    return json.dumps(prelude).encode("utf-8") + b"\n" + b"".join(chunks)


def decode_message(data: bytes) -> tuple[dict, dict]:
    sep = data.find(b"\n")
    if sep < 0:
        raise ProtocolError("missing prelude delimiter")
    try:
        prelude = json.loads(data[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad JSON prelude: {exc}") from exc
    if not isinstance(prelude, dict):
        raise ProtocolError("prelude must be a JSON object")
    shapes = prelude.get("shapes")
    if not isinstance(shapes, dict):
        raise ProtocolError("prelude is missing the shapes object")

    counts = {}
    total = 0
    for name, shape in shapes.items():
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise ProtocolError(f"invalid shape declaration for {name!r}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n > MAX_ELEMENTS:
            raise ProtocolError(f"array {name!r} declares too many elements")
        counts[name] = (tuple(shape), n)
        total += n

    payload = data[sep + 1:]
    if len(payload) != total * 4:
        raise ProtocolError(
            f"payload is {len(payload)} bytes, shapes declare {total * 4}"
        )
    arrays = {}
    offset = 0
    for name, (shape, n) in counts.items():
        flat = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        arrays[name] = flat.reshape(shape).copy()
        offset += n * 4
    meta = {k: v for k, v in prelude.items() if k != "shapes"}
    return meta, arrays

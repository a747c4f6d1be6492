"""Writer for the binary token-bag format the classifier consumes.

Layout: magic "RAAB", then five little-endian u32 fields (version, patches,
rows, cols, dim), then patches*rows*cols*dim little-endian float32 values in
row-major order.  Kept independent of the classifier package on purpose:
the bytes on disk are the contract.
"""

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RAAB"
VERSION = 1
HEADER = struct.Struct("<4s5I")


def write_tokens(path, tokens: np.ndarray) -> None:
    """Atomically write a (P, R, C, D) float array as one bag file.

    The payload is staged in a sibling temp file and moved into place, so
    readers never observe a half-written bag.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 4:
        raise ValueError(f"tokens must be 4-d (P, R, C, D), got shape {tokens.shape}")
    if not np.all(np.isfinite(tokens)):
        raise ValueError("tokens contain non-finite values")
    p, r, c, d = tokens.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    payload = np.ascontiguousarray(tokens, dtype="<f4").tobytes()
    tmp.write_bytes(HEADER.pack(MAGIC, VERSION, p, r, c, d) + payload)
    os.replace(tmp, path)

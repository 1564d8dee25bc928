"""Writer for the captioner's binary feature-file format (the wire contract).

Layout: magic "RIAF", u16 format version, u32 h/w/f (little-endian), then
h*w*f little-endian float32 values ordered (row, col, channel).  This module
implements the format independently so the extractor depends on the contract,
not on the captioner's code; conformance is covered by a cross-package test.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

FEATURE_MAGIC = b"RIAF"
FORMAT_VERSION = 1


def write_feature_file(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 3:
        raise ValueError(f"expected an (h, w, f) array, got shape {grid.shape}")
    if not np.isfinite(grid).all():
        raise ValueError("refusing to write non-finite features")
    h, w, f = grid.shape
    header = FEATURE_MAGIC + struct.pack("<HIII", FORMAT_VERSION, h, w, f)
    payload = grid.astype("<f4").tobytes(order="C")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

import hashlib
import math
from itertools import islice
from pathlib import Path
from typing import Iterable

import numpy as np

# rows per block when a matrix is computed in pieces; fixed so that results
# do not depend on the number of workers
BLOCK_ROWS = 256

MATRIX_FLOAT_FORMAT = "%.17g"
REPORT_FLOAT_FORMAT = "%.6g"


def batched(iterable, n) -> Iterable[list]:
    """
    Yield batches of size n from an iterable.

    Args:
        iterable: Iterable object
        n: Batch size

    Returns:
        Iterable of batches
    """
    if n < 1:
        raise ValueError("n must be >= 1")

    it = iter(iterable)
    while batch := list(islice(it, n)):
        yield batch


def row_blocks(n_rows: int, block_rows: int = BLOCK_ROWS) -> list[slice]:
    """
    Split the row range [0, n_rows) into consecutive slices.

    Args:
        n_rows: Number of rows
        block_rows: Rows per block

    Returns:
        List of slices covering all rows in order
    """
    return [slice(b[0], b[-1] + 1) for b in batched(range(n_rows), block_rows)]


def format_report_float(value: float) -> str:
    """
    Format a float with 6 significant digits for human-facing tables.
    """
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    return REPORT_FLOAT_FORMAT % value


def file_sha256(path: Path) -> str:
    """
    SHA-256 hex digest of a file's bytes.

    Args:
        path: File path

    Returns:
        Hex digest
    """
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def frozen_array(values, dtype=np.float64) -> np.ndarray:
    """
    Copy values into a read-only array.

    Args:
        values: Array-like input
        dtype: Target dtype

    Returns:
        Read-only numpy array
    """
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr

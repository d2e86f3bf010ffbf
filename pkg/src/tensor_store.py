"""
Dense array storage in the IAST-TENSOR binary format.

Layout (little-endian, no padding):

    bytes 0-3   magic "IAST"
    byte  4     version (1)
    byte  5     dtype code (1=float32, 2=int32, 3=uint8)
    byte  6     ndim (1-4)
    byte  7     reserved (0)
    8..8+8*ndim u64 dims
    payload     row-major values

Arrays handed out by ``load_array`` are read-only numpy arrays.
"""

import struct
from pathlib import Path
from typing import Final

import numpy as np
import structlog
from numpy.typing import NDArray

logger = structlog.get_logger(__name__)

MAGIC: Final = b"IAST"
VERSION: Final = 1
MAX_NDIM: Final = 4

# Label value for ignored pixels (all-zero pseudo-label vector).
VOID: Final = 255

# Smallest probability ever fed to a log.
PROB_EPS: Final = 1e-12

DTYPE_CODES: Final[dict[np.dtype[np.generic], int]] = {
    np.dtype(np.float32): 1,
    np.dtype(np.int32): 2,
    np.dtype(np.uint8): 3,
}
CODE_DTYPES: Final = {code: dtype for dtype, code in DTYPE_CODES.items()}

DenseArray = NDArray[np.generic]
ProbMap = NDArray[np.floating]
LabelMask = NDArray[np.int32]


class TensorStoreError(Exception):
    """Base exception for tensor storage operations."""
    pass


class BadMagicError(TensorStoreError):
    """File does not start with the IAST magic bytes."""
    pass


class TruncatedError(TensorStoreError):
    """Header or payload shorter than the header declares."""
    pass


class UnknownDtypeError(TensorStoreError):
    """Unknown dtype code or unsupported array dtype."""
    pass


class UnsupportedShapeError(TensorStoreError):
    """Array rank outside 1..4."""
    pass


class TensorIOError(TensorStoreError):
    """Filesystem failure while reading or writing a tensor."""
    pass


def header_size(ndim: int) -> int:
    """Payload offset for an array of the given rank."""
    return 8 + 8 * ndim


def encode_array(a: DenseArray) -> bytes:
    """
    Encode an array into IAST-TENSOR bytes.

    Raises:
        UnknownDtypeError: dtype is not float32, int32 or uint8
        UnsupportedShapeError: rank is 0 or above 4
    """
    arr = np.asarray(a)
    code = DTYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise UnknownDtypeError(f"Unsupported dtype: {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise UnsupportedShapeError(f"ndim must be in 1..{MAX_NDIM}, got {arr.ndim}")

    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_array(raw: bytes, source: str = "<bytes>") -> DenseArray:
    """
    Decode IAST-TENSOR bytes.

    Args:
        raw: Complete file contents
        source: Name used in error messages

    Raises:
        BadMagicError, TruncatedError, UnknownDtypeError, UnsupportedShapeError
    """
    if len(raw) < 8:
        raise TruncatedError(f"{source}: header truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}")

    version, code, ndim, _reserved = struct.unpack_from("<BBBB", raw, 4)
    if version != VERSION:
        raise TensorStoreError(f"{source}: unsupported version {version}")
    if code not in CODE_DTYPES:
        raise UnknownDtypeError(f"{source}: unknown dtype code {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise UnsupportedShapeError(f"{source}: ndim {ndim} outside 1..{MAX_NDIM}")

    offset = header_size(ndim)
    if len(raw) < offset:
        raise TruncatedError(f"{source}: dims truncated")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)

    dtype = CODE_DTYPES[code].newbyteorder("<")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    available = len(raw) - offset
    if available < expected:
        raise TruncatedError(
            f"{source}: payload has {available} bytes, header declares {expected}"
        )

    arr = np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=offset)
    return arr.astype(CODE_DTYPES[code], copy=False).reshape(shape)


def save_array(path: str | Path, a: DenseArray) -> None:
    """
    Write an array to ``path`` in IAST-TENSOR format.

    Raises:
        TensorIOError: the file could not be written
    """
    data = encode_array(a)
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise TensorIOError(f"Cannot write tensor to {path}: {e}") from e
    logger.debug("tensor_saved", path=str(path), shape=list(np.shape(a)))


def load_array(path: str | Path) -> DenseArray:
    """
    Read an IAST-TENSOR file.

    Returns:
        Read-only array with the header-declared dtype and shape

    Raises:
        TensorIOError: the file could not be read
        BadMagicError, TruncatedError, UnknownDtypeError: malformed file
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise TensorIOError(f"Cannot read tensor from {path}: {e}") from e
    return decode_array(raw, source=str(path))


def check_prob_map(prob: ProbMap, atol: float = 1e-4) -> None:
    """
    Validate a [C, H, W] probability map.

    Raises:
        TensorStoreError: wrong rank, fewer than two classes, or rows not summing to 1
    """
    if prob.ndim != 3:
        raise TensorStoreError(f"ProbMap must be [C, H, W], got shape {prob.shape}")
    if prob.shape[0] < 2:
        raise TensorStoreError(f"ProbMap needs C >= 2, got {prob.shape[0]}")
    if not np.all(np.isfinite(prob)):
        raise TensorStoreError("ProbMap contains non-finite values")
    sums = prob.sum(axis=0, dtype=np.float64)
    if np.max(np.abs(sums - 1.0)) > atol:
        raise TensorStoreError("ProbMap pixel probabilities do not sum to 1")


def check_label_mask(mask: LabelMask, num_classes: int) -> None:
    """
    Validate a [H, W] label mask against ``num_classes``.

    Raises:
        TensorStoreError: wrong rank or values outside {0..C-1} and VOID
    """
    if mask.ndim != 2:
        raise TensorStoreError(f"LabelMask must be [H, W], got shape {mask.shape}")
    valid = (mask >= 0) & (mask < num_classes) | (mask == VOID)
    if not np.all(valid):
        bad = np.unique(mask[~valid])[:5].tolist()
        raise TensorStoreError(f"LabelMask has values outside 0..{num_classes - 1}/VOID: {bad}")

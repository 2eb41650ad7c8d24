"""Binary containers and audio I/O.

Two on-disk formats live here.

TensorFile (magic ``LTEB``) holds one dense float tensor::

    offset  size        field
    0       4           magic b"LTEB"
    4       2           format version (uint16, currently 1)
    6       1           element bits (uint8, 32 or 64)
    7       1           rank (uint8)
    8       8 * rank    dims (uint64 each)
    ...     prod(dims) * element size    payload, C order
    ...     4           metadata length L (uint32)
    ...     L           metadata, UTF-8 JSON object

Every integer and float is little-endian regardless of host.

Bundle (magic ``LTBN``) stores a JSON header plus any number of named arrays;
it backs forest, SVM and CNN model files::

    0   4   magic b"LTBN"
    4   2   version (uint16)
    6   4   header length H (uint32)
    10  H   JSON header {"meta": ..., "arrays": [{name, dtype, shape, offset, nbytes}]}
    ... array payloads, offsets relative to the end of the header
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

TENSOR_MAGIC = b"LTEB"
TENSOR_VERSION = 1
BUNDLE_MAGIC = b"LTBN"
BUNDLE_VERSION = 1

_BITS_TO_DTYPE = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised when a binary file does not match its declared layout."""


def encode_tensor(array, metadata: dict | None = None) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        bits = 32
    elif arr.dtype == np.float64 or np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        bits = 64
    else:
        raise FormatError(f"unsupported element type {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    dtype = _BITS_TO_DTYPE[bits]
    payload = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    head = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, bits, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload + struct.pack("<I", len(meta)) + meta


def decode_tensor(blob: bytes) -> tuple[np.ndarray, dict]:
    if len(blob) < 8 or blob[:4] != TENSOR_MAGIC:
        raise FormatError("bad magic: not a tensor file")
    version, bits, rank = struct.unpack_from("<HBB", blob, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if bits not in _BITS_TO_DTYPE:
        raise FormatError(f"unsupported element size {bits} bits")
    pos = 8
    if len(blob) < pos + 8 * rank:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", blob, pos)
    pos += 8 * rank
    dtype = _BITS_TO_DTYPE[bits]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) < pos + nbytes + 4:
        raise FormatError("payload size mismatch")
    data = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    pos += nbytes
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) != pos + meta_len:
        raise FormatError("payload size mismatch")
    meta = json.loads(blob[pos:].decode("utf-8")) if meta_len else {}
    return data.reshape(dims).astype(dtype.newbyteorder("="), copy=True), meta


def write_tensor(path, array, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode_tensor(array, metadata))


def read_tensor(path) -> tuple[np.ndarray, dict]:
    return decode_tensor(Path(path).read_bytes())


def encode_bundle(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(value)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "<|" else arr.dtype
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append(
            {"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    return BUNDLE_MAGIC + struct.pack("<HI", BUNDLE_VERSION, len(header)) + header + b"".join(chunks)


def decode_bundle(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 10 or blob[:4] != BUNDLE_MAGIC:
        raise FormatError("bad magic: not a bundle")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    base = 10 + hlen
    if len(blob) < base:
        raise FormatError("truncated bundle header")
    header = json.loads(blob[10:base].decode("utf-8"))
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise FormatError(f"payload size mismatch for array {e['name']!r}")
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize if dt.itemsize else 0, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return header["meta"], arrays


def read_wav(path, target_rate: int = 44100, resample: bool = False) -> tuple[np.ndarray, int]:
    """Load a PCM WAV as float64 mono in [-1, 1].

    Stereo input is downmixed by averaging. A rate other than ``target_rate``
    is resampled when ``resample`` is set, otherwise rejected.
    """
    rate, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        if data.dtype == np.uint8:
            x = (data.astype(np.float64) - 128.0) / 128.0
        else:
            x = data.astype(np.float64) / scale
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        if not resample:
            raise ValueError(f"{path}: sample rate {rate} Hz, expected {target_rate} Hz (use --resample)")
        g = np.gcd(int(rate), int(target_rate))
        x = resample_poly(x, target_rate // g, rate // g)
        rate = target_rate
    return x, int(rate)


def write_wav(path, samples, sample_rate: int) -> None:
    """Write float samples as 16-bit PCM (values clipped to [-1, 1))."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    wavfile.write(path, sample_rate, np.round(x * 32768.0).astype("<i2"))

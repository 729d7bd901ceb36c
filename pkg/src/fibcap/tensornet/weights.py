"""``.fcw`` weight files.

Layout: magic ``FCW1`` then one record per parameter tensor::

    u32 name_len | name (utf-8) | u8 dtype | u8 rank | u32 dims[rank] | payload

All integers and payloads are little-endian. dtype 0 is float32, 1 float64.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FCW1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class WeightsFormatError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class LoadReport:
    matched: list = field(default_factory=list)
    randomly_initialized: list = field(default_factory=list)
    unused: list = field(default_factory=list)

    def to_dict(self):
        return {
            "matched": self.matched,
            "randomly_initialized": self.randomly_initialized,
            "unused": self.unused,
        }


def write_weights(params, path):
    """Serialise a name -> array mapping."""
    chunks = [MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic bytes {buf[:4]!r}")
    pos = 4
    out = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise WeightsFormatError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise WeightsFormatError(f"{path}: corrupt record at byte {pos}") from exc
    return out


def save_weights(model, path):
    write_weights(model.named_parameters(), path)


def load_weights(model, path, strict=False):
    """Copy matching tensors into ``model``.

    Names present in the model but absent from the file keep their current
    (random) initialisation and are listed in the report. A matched name with
    a different shape raises :class:`ShapeMismatchError`.
    """
    stored = read_weights(path)
    params = model.named_parameters()
    report = LoadReport()
    for name, target in params.items():
        if name not in stored:
            report.randomly_initialized.append(name)
            continue
        src = stored[name]
        if src.shape != target.shape:
            raise ShapeMismatchError(f"layer {name}: file shape {src.shape} != model shape {target.shape}")
        target[...] = src.astype(target.dtype)
        report.matched.append(name)
    report.unused = [n for n in stored if n not in params]
    if strict and (report.randomly_initialized or report.unused):
        raise ShapeMismatchError(
            f"architecture mismatch: missing {report.randomly_initialized[:3]}, unexpected {report.unused[:3]}")
    return report

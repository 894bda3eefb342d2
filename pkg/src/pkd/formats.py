"""Little-endian binary containers for checkpoints (PKDC) and datasets (PKDS)."""
import struct

import numpy as np

PKDC_MAGIC = b"PKDC"
PKDS_MAGIC = b"PKDS"
VERSION = 1

ROLE_TAGS = {"student": 0, "teacher": 1, "anticipation": 2}
ROLE_NAMES = {v: k for k, v in ROLE_TAGS.items()}


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


# ------------------------------------------------------------- PKDC


def encode_checkpoint(header, tensors):
    """``header``: dict with role, layers, past_extent, k, C, D, M.

    ``tensors``: ordered name -> array; stored as f32.
    """
    parts = [PKDC_MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack(
        "<7I", ROLE_TAGS[header["role"]], header["layers"], header["past_extent"],
        header["k"], header["C"], header["D"], header["M"]))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf):
    r = _Reader(buf)
    if bytes(r.take(4)) != PKDC_MAGIC:
        raise FormatError("not a PKDC checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported PKDC version {version}")
    role, layers, past, k, C, D, M = r.unpack("<7I")
    if role not in ROLE_NAMES:
        raise FormatError(f"unknown role tag {role}")
    header = dict(role=ROLE_NAMES[role], layers=layers, past_extent=past, k=k, C=C, D=D, M=M)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = bytes(r.take(n)).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = r.array("<f4", size).reshape(dims)
    r.done()
    return header, tensors


# ------------------------------------------------------------- PKDS


def encode_dataset(M, D, sequences):
    """``sequences``: iterable of (features [T x D], labels [T])."""
    sequences = list(sequences)
    parts = [PKDS_MAGIC, struct.pack("<4I", VERSION, M, D, len(sequences))]
    for feats, labels in sequences:
        feats = np.asarray(feats)
        labels = np.asarray(labels)
        if feats.ndim != 2 or feats.shape[1] != D:
            raise FormatError(f"features must be T x {D}, got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise FormatError(f"labels shape {labels.shape} does not match T={feats.shape[0]}")
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
            raise FormatError("labels must fit in u16")
        parts.append(struct.pack("<I", feats.shape[0]))
        parts.append(np.ascontiguousarray(feats, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    return b"".join(parts)


def decode_dataset(buf):
    r = _Reader(buf)
    if bytes(r.take(4)) != PKDS_MAGIC:
        raise FormatError("not a PKDS dataset (bad magic)")
    version, M, D, count = r.unpack("<4I")
    if version != VERSION:
        raise FormatError(f"unsupported PKDS version {version}")
    seqs = []
    for _ in range(count):
        (T,) = r.unpack("<I")
        feats = r.array("<f4", T * D).reshape(T, D)
        labels = r.array("<u2", T).astype(np.int64)
        seqs.append((feats, labels))
    r.done()
    return M, D, seqs

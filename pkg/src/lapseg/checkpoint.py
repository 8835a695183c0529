"""LRRC checkpoint container: named tensors in one binary file.

Layout: magic "LRRC", u32 version, u32 entry count, then per entry a u16
name length, the utf-8 name, and an embedded LRRT tensor record. Entries are
written in sorted name order so save -> load -> save is byte-identical.
"""

import numpy as np

from .tensor import FormatError, read_tensor_bytes, write_tensor_bytes

LRRC_MAGIC = b"LRRC"
LRRC_VERSION = 1


def save_checkpoint(path, named):
    """Write a dict of name -> array. Payloads are stored as float32."""
    names = sorted(named)
    if len(names) != len(named):
        raise ValueError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(LRRC_MAGIC)
        fh.write(np.uint32(LRRC_VERSION).tobytes())
        fh.write(np.uint32(len(names)).tobytes())
        for name in names:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"name too long: {name[:40]}...")
            fh.write(np.uint16(len(raw)).tobytes())
            fh.write(raw)
            fh.write(write_tensor_bytes(named[name]))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != LRRC_MAGIC:
        raise FormatError("bad container magic, expected LRRC")
    if len(buf) < 12:
        raise FormatError("truncated container header")
    version = int(np.frombuffer(buf[4:8], dtype="<u4")[0])
    if version != LRRC_VERSION:
        raise FormatError(f"unsupported container version {version}")
    count = int(np.frombuffer(buf[8:12], dtype="<u4")[0])
    pos = 12
    out = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated entry header")
        nlen = int(np.frombuffer(buf[pos:pos + 2], dtype="<u2")[0])
        pos += 2
        if pos + nlen > len(buf):
            raise FormatError("truncated entry name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        arr, used = read_tensor_bytes(buf, pos)
        pos += used
        out[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after the last entry")
    return out

"""Named-tensor archive: the on-disk format for weights, checkpoints and CAM dumps.

Binary layout, one record per tensor, records back to back:

    [name length: uint32 LE][name: UTF-8 bytes]
    [dtype tag: 1 byte, 0 = float32]
    [rank: uint8]
    [shape: rank x uint32 LE]
    [payload: row-major little-endian float32]
"""

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

DTYPE_FLOAT32 = 0


def write_archive(path, tensors) -> None:
    """Write a mapping of name -> tensor/array in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for name, tensor in tensors.items():
            if isinstance(tensor, torch.Tensor):
                if tensor.dtype != torch.float32:
                    raise DataError(f"record '{name}' must be float32, got {tensor.dtype}")
                arr = tensor.detach().cpu().numpy()
            else:
                arr = np.asarray(tensor)
                if arr.dtype != np.float32:
                    raise DataError(f"record '{name}' must be float32, got {arr.dtype}")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", DTYPE_FLOAT32, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def read_archive(path) -> "OrderedDict[str, torch.Tensor]":
    """Read all records back as float32 torch tensors, preserving file order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"archive not found: {path}")
    out = OrderedDict()
    data = path.read_bytes()
    pos = 0
    total = len(data)
    while pos < total:
        if pos + 4 > total:
            raise DataError(f"truncated archive record header in {path}")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len + 2 > total:
            raise DataError(f"truncated archive record header in {path}")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_tag, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if dtype_tag != DTYPE_FLOAT32:
            raise DataError(f"unsupported dtype tag {dtype_tag} for record '{name}' in {path}")
        if pos + 4 * rank > total:
            raise DataError(f"truncated shape for record '{name}' in {path}")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if pos + 4 * count > total:
            raise DataError(f"truncated payload for record '{name}' in {path}")
        payload = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = torch.from_numpy(payload.copy())
    return out

"""File formats: raw tensor dumps, PGM image grids and parameter checkpoints.

Tensor dump: one ASCII header line ``ARC1 <dtype> <ndims> <d0> <d1> ...``
followed by the values in C order, little endian.
"""

from __future__ import annotations

import math

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8", "uint8": "u1"}


def write_tensor(path, arr) -> None:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name}")
    header = f"ARC1 {name} {arr.ndim}" + "".join(f" {d}" for d in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) < 3 or header[0] != "ARC1":
            raise ValueError(f"{path}: not an ARC1 tensor dump")
        name, ndim = header[1], int(header[2])
        shape = tuple(int(d) for d in header[3:])
        if name not in _DTYPES or len(shape) != ndim:
            raise ValueError(f"{path}: malformed header")
        data = np.frombuffer(fh.read(), dtype=_DTYPES[name])
    if data.size != math.prod(shape):
        raise ValueError(f"{path}: expected {math.prod(shape)} values, found {data.size}")
    return data.reshape(shape).astype(name)


def to_gray(x) -> np.ndarray:
    """Map ``[-1, 1]`` linearly to ``[0, 255]``, rounding half to even."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def image_grid(images, cols=None) -> np.ndarray:
    """Tile (n, h, w) images row by row; unused cells are black."""
    images = np.asarray(images)
    n, h, w = images.shape
    cols = cols or max(1, math.ceil(math.sqrt(n)))
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    gray = to_gray(images)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = gray[i]
    return grid


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError(f"{path}: expected an 8-bit P5 image")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def write_sample_grid(path, samples, height, width, cols=None) -> np.ndarray:
    grid = image_grid(np.asarray(samples).reshape(-1, height, width), cols)
    write_pgm(path, grid)
    return grid


def save_checkpoint(path, params: dict, config_text: str) -> None:
    np.savez(path, __config__=np.array(config_text), **{k: v for k, v in params.items()})


def load_checkpoint(path) -> tuple[dict, str]:
    with np.load(path, allow_pickle=False) as z:
        text = str(z["__config__"])
        params = {k: z[k].copy() for k in z.files if k != "__config__"}
    return params, text

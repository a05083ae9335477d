"""Binary tensor and parameter files, PGM previews and run configuration.

Tensor file layout (little-endian throughout)::

    b"CDT1" | u16 version | u16 rank | u32 dim * rank | f32 payload (row-major)

Parameter file layout::

    b"CDTP" | u16 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
    then per tensor: u16 name_len | name | u16 rank | u32 dims | f32 payload
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from cdtsde.errors import ConfigError, FormatError

TENSOR_MAGIC = b"CDT1"
PARAM_MAGIC = b"CDTP"
VERSION = 1


@contextmanager
def atomic_open(path, mode: str = "wb"):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- tensors -------------------------------------------------------------------


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4")  # tobytes() is row-major; keeps rank 0
    head = TENSOR_MAGIC + struct.pack("<HH", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 4 * n:
        raise FormatError(f"payload holds {len(buf) - off} bytes, dims {dims} need {4 * n}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).copy()


def write_tensor(path, arr) -> None:
    with atomic_open(path) as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- parameters ------------------------------------------------------------------


def write_params(path, tensors: dict, meta: dict) -> None:
    """Store named float32 tensors plus a JSON metadata block."""
    m = json.dumps(meta, sort_keys=True).encode()
    parts = [PARAM_MAGIC, struct.pack("<HI", VERSION, len(m)), m, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        a = np.asarray(value, dtype="<f4")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<H", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    with atomic_open(path) as fh:
        fh.write(b"".join(parts))


def read_params(path) -> tuple[dict, dict]:
    """Return ``(meta, tensors)``."""
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != PARAM_MAGIC:
            raise FormatError("not a parameter file (bad magic)")
        version, mlen = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported parameter file version {version}")
        off = 10
        meta = json.loads(buf[off:off + mlen].decode())
        off += mlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + nlen].decode()
            off += 2 + nlen
            (rank,) = struct.unpack_from("<H", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 2)
            off += 2 + 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise FormatError(f"truncated payload for {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).copy()
            off += 4 * n
        if off != len(buf):
            raise FormatError("trailing bytes after last tensor")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed parameter file: {exc}") from None
    return meta, tensors


# --- previews --------------------------------------------------------------------


def encode_pgm(img) -> bytes:
    """8-bit binary PGM of a ``[-1, 1]`` image mapped through ``(x + 1) / 2``."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise FormatError(f"PGM needs a 2-d image, got shape {x.shape}")
    v = np.clip(np.rint((x + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode() + v.tobytes()


def write_pgm(path, img) -> None:
    with atomic_open(path) as fh:
        fh.write(encode_pgm(img))


# --- run configuration -------------------------------------------------------------

VARIANT_NAMES = {"linear": "linear", "channel": "channel_poly", "dynamic": "dynamic"}


@dataclass(frozen=True)
class RunConfig:
    task: str
    out_dir: str
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    t1: int = 500
    sampler_steps: int = 20
    schedule_variant: str = "dynamic"
    train_steps: int = 2000
    lr: float = 2e-3
    mixer_lr_mult: float = 10.0
    seed: int = 0
    n_pairs: int = 200
    image_size: int = 32
    batch: int = 16

    def __post_init__(self):
        if self.schedule_variant not in VARIANT_NAMES:
            raise ConfigError(f"schedule_variant must be one of {sorted(VARIANT_NAMES)}, got {self.schedule_variant!r}")

    @property
    def variant(self) -> str:
        return VARIANT_NAMES[self.schedule_variant]

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


_REQUIRED = ("task", "out_dir")


def parse_config(text: str, overrides=()) -> RunConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment.  ``overrides`` are extra lines."""
    types = {f.name: f.type for f in fields(RunConfig)}
    raw = {}
    for lineno, line in enumerate(list(text.splitlines()) + list(overrides), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    conv = {"int": int, "float": float, "str": str}
    values = {}
    for key, value in raw.items():
        try:
            values[key] = conv[types[key]](value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {types[key]}") from None
    return RunConfig(**values)


def load_config(path, overrides=()) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)

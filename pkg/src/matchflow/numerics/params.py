"""Named parameter storage, initialization, and binary serialization."""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

_MAGIC = b"MFLOWPRM"
_VERSION = 1


class ParamStore:
    """Flat name -> Tensor map; the single owner of trainable state.

    Names are dotted paths ("features.stem.conv1.weight").  Iteration is
    always in sorted-name order so downstream consumers (serialization,
    gradient reports, optimizers) see a stable layout.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, dtype=None) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grad_norm(self) -> float:
        """Global L2 norm across every parameter gradient."""
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with every parameter cast to dtype."""
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.astype(dtype), dtype=dtype)
        return out

    # -- serialization -----------------------------------------------------

    def save(self, path: str):
        """Write all parameters to a little-endian binary file.

        Layout: magic, uint32 version, uint64 count, then per parameter in
        sorted name order: uint64 name length, UTF-8 name, uint64 rank,
        uint64 extents, float32 values.
        """
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            f.write(struct.pack("<Q", len(self._params)))
            for name, t in self.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<Q", len(nb)))
                f.write(nb)
                f.write(struct.pack("<Q", t.ndim))
                f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
                f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str) -> "ParamStore":
        store = cls()
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:8] != _MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported parameter file version {version}")
        (count,) = struct.unpack_from("<Q", blob, 12)
        off = 20
        for _ in range(count):
            (nlen,) = struct.unpack_from("<Q", blob, off)
            off += 8
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<Q", blob, off)
            off += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            end = off + 4 * n
            if end > len(blob):
                raise ValueError(f"{path}: truncated parameter file at {name!r}")
            data = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape)
            off = end
            store.add(name, data.astype(np.float32))
        if off != len(blob):
            raise ValueError(f"{path}: {len(blob) - off} trailing bytes after last parameter")
        return store


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight draw."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def add_conv(store: ParamStore, prefix: str, rng: np.random.Generator,
             c_out: int, c_in: int, k: int, dtype=np.float32):
    """Register a conv kernel + zero bias pair under prefix."""
    w = store.add(f"{prefix}.weight", uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
    b = store.add(f"{prefix}.bias", np.zeros(c_out, dtype=dtype))
    return w, b


def add_linear(store: ParamStore, prefix: str, rng: np.random.Generator,
               out_dim: int, in_dim: int, dtype=np.float32):
    """Register a linear weight + zero bias pair under prefix."""
    w = store.add(f"{prefix}.weight", uniform_init(rng, (out_dim, in_dim), in_dim, dtype))
    b = store.add(f"{prefix}.bias", np.zeros(out_dim, dtype=dtype))
    return w, b

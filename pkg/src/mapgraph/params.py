"""Named parameter store, Adam updates, and binary checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tensor
from .errors import CheckpointError, NumericError, ShapeError

_MAGIC = b"MGCK"
_FORMAT_VERSION = 1


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Insertion-ordered mapping of names to trainable tensors.

    Also owns the Adam state (first/second moments plus a shared step
    counter for bias correction).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}
        self.step_count = 0

    def add(self, name: str, value: Array) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64).copy(), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros(t.shape)
        self._v[name] = np.zeros(t.shape)
        return t

    def linear(self, prefix: str, rng: np.random.Generator, n_in: int, n_out: int) -> None:
        """Add weight (n_in, n_out) and bias (n_out,), both fan-in uniform."""
        self.add(f"{prefix}.w", fan_in_uniform(rng, (n_in, n_out), n_in))
        self.add(f"{prefix}.b", fan_in_uniform(rng, (n_out,), n_in))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def named_grads(self, grads: dict[Tensor, Array]) -> dict[str, Array]:
        """Map a backward() result onto names; absent entries become zeros."""
        out = {}
        for name, t in self._params.items():
            g = grads.get(t)
            out[name] = np.zeros(t.shape) if g is None else np.asarray(g)
        return out

    def adam_step(
        self,
        grads: dict[str, Array],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        """One Adam update over the parameters named in ``grads``."""
        b1, b2 = betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, g in grads.items():
            if name not in self._params:
                raise ShapeError(f"gradient for unknown parameter {name!r}")
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}")
            p = self._params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != {p.shape} for {name!r}")
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.data = p.data - update

    def state_dict(self) -> dict[str, Array]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, Array]) -> None:
        """Replace parameter values; names and shapes must match exactly."""
        mine = set(self._params)
        theirs = set(state)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise CheckpointError(
                f"parameter names differ (missing {missing[:4]}, unexpected {extra[:4]})"
            )
        for name, value in state.items():
            arr = np.asarray(value, dtype=np.float64)
            p = self._params[name]
            if arr.shape != p.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.shape}"
                )
            p.data = arr.copy()


def linear(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, store[f"{prefix}.w"]), store[f"{prefix}.b"])


def mlp2(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Two-layer MLP with a ReLU between; layers ``prefix.0`` / ``prefix.1``."""
    return linear(ad.relu(linear(x, store, f"{prefix}.0")), store, f"{prefix}.1")


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    """Write parameters to a little-endian binary file (bit-exact round trip)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(store.names())))
        for name, t in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, Array]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        piece = blob[off : off + n]
        off += n
        return piece

    if take(4) != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: dict[str, Array] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
        state[name] = data.reshape(shape)
    if off != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return state

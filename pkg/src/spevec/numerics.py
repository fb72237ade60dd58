"""Array plumbing shared by every layer: validation, the layer base class,
finite-difference gradient checking and the flat tensor section format.

Tensors are plain ``numpy.ndarray`` objects in float64. A layer follows a
simple contract: ``forward`` caches whatever ``backward`` needs, and
``backward(grad_out)`` returns the gradient w.r.t. the input while adding
parameter gradients into ``self.grads``.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterator

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a tensor at a module boundary."""

    def __init__(self, name: str):
        super().__init__(f"non-finite values in tensor '{name}'")
        self.name = name


class ContractViolation(ValueError):
    pass


class ShapeError(ValueError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert ``x`` to a float64 array, rejecting NaN/Inf eagerly."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.size and not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)
    return arr


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)


# ---------------------------------------------------------------------------
# layer base class


class Module:
    """Minimal parameter container with recursive traversal.

    Sub-modules are discovered from instance attributes (a ``Module`` or a
    list of them) in definition order, so parameter names are stable.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add_param(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=DTYPE)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}{key}.")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for key, p in mod.params.items():
                yield prefix + key, p, mod.grads[key]

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.named_modules():
            for key, p in mod.params.items():
                out[prefix + key] = p
            for key, b in mod.buffers.items():
                out[prefix + key] = b
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for key, dst in own.items():
            src = np.asarray(state[key])
            if src.shape != dst.shape:
                raise ShapeError(
                    f"'{key}': expected shape {dst.shape}, found {src.shape}"
                )
            dst[...] = src


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    epsilon: float = 1e-6,
    indices=None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``x`` is perturbed in place and restored, so closures that hold a
    reference to a parameter array see the perturbation. With ``indices``
    (flat positions) only those coordinates are evaluated; the rest of the
    returned array is zero.
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ContractViolation(f"epsilon must lie in [1e-8, 1e-3], got {epsilon}")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ContractViolation("x must be a contiguous array")
    grad = np.zeros(x.size, dtype=DTYPE)
    idx = range(x.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = _scalar(fn(x))
        flat[i] = orig - epsilon
        fm = _scalar(fn(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * epsilon)
    return grad.reshape(x.shape)


def _scalar(value) -> float:
    arr = np.asarray(value)
    if arr.ndim != 0 and arr.size != 1:
        raise ContractViolation(f"function must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(()))


def gradient_relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.shape != n.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {n.shape}")
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def linear_probe(shape, seed: int = 0) -> np.ndarray:
    """Fixed-seed Gaussian used to reduce a tensor output to a scalar."""
    return np.random.default_rng(seed).standard_normal(shape)


def sample_indices(size: int, max_coords: int | None, rng: np.random.Generator):
    if max_coords is None or size <= max_coords:
        return None
    return rng.choice(size, size=max_coords, replace=False)


def check_gradients(
    forward: Callable[[], np.ndarray],
    backward: Callable[[np.ndarray], dict[str, np.ndarray]],
    wrt: dict[str, np.ndarray],
    seed: int = 0,
    epsilon: float = 1e-6,
    max_coords: int | None = None,
) -> dict[str, float]:
    """Compare analytic and central-difference gradients for every array in ``wrt``.

    ``forward()`` recomputes the output from the (possibly perturbed) arrays;
    ``backward(probe)`` runs one backward pass with the probe as upstream
    gradient and returns a dict keyed like ``wrt``. Returns the relative
    error per name, evaluated on a random coordinate subset when
    ``max_coords`` is set.
    """
    out = forward()
    probe = linear_probe(np.shape(out), seed)
    analytic = {k: np.array(v, copy=True) for k, v in backward(probe).items()}

    def scalar(_):
        return float(np.sum(forward() * probe))

    rng = np.random.default_rng(seed + 1)
    errors = {}
    for name, arr in wrt.items():
        idx = sample_indices(arr.size, max_coords, rng)
        numeric = finite_difference_gradient(scalar, arr, epsilon, idx)
        a = analytic[name]
        if idx is not None:
            a, numeric = a.reshape(-1)[idx], numeric.reshape(-1)[idx]
        errors[name] = gradient_relative_error(a, numeric)
    return errors


# ---------------------------------------------------------------------------
# flat tensor sections: u16 name length, name, u32 ndim, u32 dims, float32 LE data


def write_tensor_section(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_section(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = _unpack(fh, "<H")
    name = _read_exact(fh, n).decode("utf-8")
    (ndim,) = _unpack(fh, "<I")
    shape = _unpack(fh, f"<{ndim}I") if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return name, data.astype(DTYPE).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor section at byte offset {pos}")
    return buf


def _unpack(fh: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))

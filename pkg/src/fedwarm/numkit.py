"""Flat-vector numerics, seeded random streams and a finite-difference oracle.

Every model in this package is a flat ``float64`` vector. Random streams are
derived from ``(seed, path)`` by hashing, so a client's stream does not depend
on how many draws other clients made or in which order they ran.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Sequence

import numpy as np

DTYPE = np.float64
FD_STEP = 1e-5


class NonFiniteError(ValueError):
    """Raised when a vector or a loss evaluation leaves the finite reals."""


def as_param(values, dim: int | None = None) -> np.ndarray:
    """Return a contiguous float64 copy of ``values`` and check its shape."""
    w = np.array(values, dtype=DTYPE, copy=True).reshape(-1)
    if dim is not None and w.size != dim:
        raise ValueError(f"parameter vector has length {w.size}, expected {dim}")
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("parameter vector contains NaN or Inf")
    return w


def check_finite(w: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(w)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return w


def _path_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path components must be non-negative, got {part}")
        return int(part)
    # strings (role names) hash to a stable 64-bit word
    digest = hashlib.blake2b(str(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_stream(seed: int, path: Sequence = ()) -> np.random.Generator:
    """Independent generator for ``(seed, path)``.

    ``path`` is a tuple such as ``(session, round, client)``; string parts are
    allowed for roles (``"split"``, ``"participation"``). Equal inputs give
    identical sequences on every platform numpy supports.
    """
    words = [_path_word(p) for p in path]
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=tuple(words))
    return np.random.Generator(np.random.PCG64(ss))


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``a*x + y`` as a new vector."""
    return a * x + y


def scale(a: float, x: np.ndarray) -> np.ndarray:
    return a * x


def mean_vectors(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean with Neumaier-compensated summation in list order.

    The sum is within about one ulp of exact for short lists, so the mean is
    within a couple of ulps of the true rational mean.
    """
    if len(vectors) == 0:
        raise ValueError("cannot average an empty list of vectors")
    acc = np.array(vectors[0], dtype=DTYPE, copy=True)
    comp = np.zeros_like(acc)
    for v in vectors[1:]:
        v = np.asarray(v, dtype=DTYPE)
        t = acc + v
        big = np.abs(acc) >= np.abs(v)
        comp += np.where(big, (acc - t) + v, (v - t) + acc)
        acc = t
    return (acc + comp) / len(vectors)


def weighted_mean(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_i a_i v_i / sum_i a_i``, accumulated in list order."""
    if len(vectors) == 0:
        raise ValueError("cannot average an empty list of vectors")
    if len(vectors) != len(weights):
        raise ValueError("vectors and weights differ in length")
    total = float(sum(weights))
    # offsets from the first vector: equal inputs come back bit-exact
    base = np.asarray(vectors[0], dtype=DTYPE)
    acc = np.zeros_like(base)
    for v, a in zip(vectors[1:], weights[1:]):
        acc += float(a) * (v - base)
    return base + acc / total


def rel_err(a, b) -> float:
    """Largest coordinate-wise ``|a-b| / max(1, |a|, |b|)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_grad(
    loss_fn: Callable[[np.ndarray], float], w, h: float = FD_STEP
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``w``."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    w = np.array(w, dtype=DTYPE, copy=True).reshape(-1)
    g = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + h
        up = float(loss_fn(w))
        w[i] = orig - h
        down = float(loss_fn(w))
        w[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"loss is not finite when perturbing coordinate {i}")
        g[i] = (up - down) / (2.0 * h)
    return g

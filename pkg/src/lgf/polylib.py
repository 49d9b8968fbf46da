"""Polynomial candidate libraries for sparse regression of dynamics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MAX_LIBRARY_ENTRIES",
    "LibraryTooLargeError",
    "CandidateLibrary",
    "library_size",
    "build_library",
    "eval_library",
    "build_library_matrix",
]

# Cap on the number of entries of a library matrix (rows x columns).
MAX_LIBRARY_ENTRIES = 2_000_000


class LibraryTooLargeError(ValueError):
    """Raised when a library (or library matrix) would exceed the size cap."""

    def __init__(self, size: int, cap: int):
        super().__init__(f"library too large: {size} entries requested, cap is {cap}")
        self.size = size
        self.cap = cap


def library_size(n: int, P: int, cap: int = MAX_LIBRARY_ENTRIES) -> int:
    """Number of monomials in ``n`` variables of total degree at most ``P``.

    This is the binomial coefficient ``C(n + P, P)``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if P < 0:
        raise ValueError(f"P must be >= 0, got {P}")
    p = math.comb(n + P, P)
    if p > cap:
        raise LibraryTooLargeError(p, cap)
    return p


@dataclass(frozen=True)
class CandidateLibrary:
    """All monomials up to total degree ``P`` over ``n`` variables.

    ``exponents`` is a ``(p, n)`` integer array in graded lexicographic order:
    ascending total degree, and within one degree the order produced by
    ``itertools.combinations_with_replacement`` over variable indices.
    For ``n=2, P=2`` this is ``1, a1, a2, a1^2, a1 a2, a2^2``.
    """

    n: int
    P: int
    exponents: np.ndarray

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def __len__(self) -> int:
        return self.size

    def names(self, symbol: str = "a") -> list[str]:
        out = []
        for row in self.exponents:
            parts = []
            for i, e in enumerate(row):
                if e == 1:
                    parts.append(f"{symbol}{i}")
                elif e > 1:
                    parts.append(f"{symbol}{i}^{e}")
            out.append(" ".join(parts) if parts else "1")
        return out


def build_library(n: int, P: int, cap: int = MAX_LIBRARY_ENTRIES) -> CandidateLibrary:
    p = library_size(n, P, cap)
    exponents = np.zeros((p, n), dtype=np.int64)
    row = 0
    for degree in range(P + 1):
        for combo in itertools.combinations_with_replacement(range(n), degree):
            for i in combo:
                exponents[row, i] += 1
            row += 1
    assert row == p
    exponents.setflags(write=False)
    return CandidateLibrary(n=n, P=P, exponents=exponents)


def _power_table(A: np.ndarray, P: int) -> np.ndarray:
    # powers[d] = A**d, built by repeated multiplication
    powers = np.empty((P + 1,) + A.shape)
    powers[0] = 1.0
    for d in range(1, P + 1):
        powers[d] = powers[d - 1] * A
    return powers


def _evaluate_rows(lib: CandidateLibrary, A: np.ndarray) -> np.ndarray:
    powers = _power_table(A, lib.P)
    out = np.ones((A.shape[0], lib.size))
    for j, row in enumerate(lib.exponents):
        col = out[:, j]
        for i in np.flatnonzero(row):
            col *= powers[row[i], :, i]
    return out


def eval_library(lib: CandidateLibrary, a) -> np.ndarray:
    """Evaluate every library monomial at a single state ``a``."""
    a = np.asarray(a, dtype=float)
    if a.shape != (lib.n,):
        raise ValueError(f"state has shape {a.shape}, library expects ({lib.n},)")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite entries in library input")
    return _evaluate_rows(lib, a[None, :])[0]


def build_library_matrix(
    lib: CandidateLibrary, A, cap: int = MAX_LIBRARY_ENTRIES
) -> np.ndarray:
    """Stack ``eval_library`` over the rows of the ``(K, n)`` sample matrix."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] != lib.n:
        raise ValueError(f"sample matrix has shape {A.shape}, expected (K, {lib.n})")
    if A.shape[0] < 1:
        raise ValueError("sample matrix has no rows")
    entries = A.shape[0] * lib.size
    if entries > cap:
        raise LibraryTooLargeError(entries, cap)
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite entries in library input")
    return _evaluate_rows(lib, A)

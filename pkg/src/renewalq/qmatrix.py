"""Dense complex linear algebra at small fixed dimension.

Everything in this module works on plain ``numpy`` arrays of complex128 and
is meant for Hilbert space dimensions up to roughly 16.  The vectorization
convention is column stacking throughout: ``vec(A X B) = kron(B.T, A) vec(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-10


def _as_square(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ValueError(f"{name} must have dimension >= 1")
    if not np.all(np.isfinite(a.view(float))):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def hermiticity_defect(a) -> float:
    """Max-abs deviation of a square matrix from its conjugate transpose."""
    a = np.asarray(a, dtype=complex)
    return float(np.max(np.abs(a - a.conj().T))) if a.size else 0.0


def mat_exp(a) -> np.ndarray:
    """Matrix exponential of a square complex matrix.

    Uses scaling-and-squaring with a Pade approximant; relative accuracy is
    well below 1e-12 for norms up to ~20, which covers every generator this
    package rescales by a time step.
    """
    a = _as_square(a)
    return scipy.linalg.expm(a)


def vectorize(a) -> np.ndarray:
    """Column-stack a square matrix into a length dim**2 vector."""
    a = _as_square(a)
    return a.reshape(-1, order="F").copy()


def devectorize(v) -> np.ndarray:
    """Inverse of :func:`vectorize`; the length must be a perfect square."""
    v = np.asarray(v, dtype=complex).reshape(-1)
    dim = int(round(np.sqrt(v.size)))
    if dim * dim != v.size:
        raise ValueError(f"vector length {v.size} is not a perfect square")
    return v.reshape((dim, dim), order="F").copy()


def min_eigenvalue_hermitian(a, tol: float | None = None) -> float:
    """Smallest eigenvalue of a Hermitian matrix.

    Raises ValueError when the input deviates from Hermiticity by more than
    ``tol`` (default 1e-10 scaled by the matrix magnitude).
    """
    a = _as_square(a)
    scale = max(1.0, float(np.max(np.abs(a))))
    if tol is None:
        tol = DEFAULT_TOL * scale
    if hermiticity_defect(a) > tol:
        raise ValueError("matrix is not Hermitian within tolerance")
    return float(np.linalg.eigvalsh((a + a.conj().T) / 2.0)[0])


def trace_distance(r1, r2) -> float:
    """Trace distance between two states: half the sum of |eigenvalues| of r1 - r2."""
    m1 = as_matrix(r1)
    m2 = as_matrix(r2)
    if m1.shape != m2.shape:
        raise ValueError(f"dimension mismatch: {m1.shape} vs {m2.shape}")
    diff = m1 - m2
    diff = (diff + diff.conj().T) / 2.0
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff))))


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, positive semidefinite, unit-trace complex matrix.

    Validation happens on construction; ``tol`` bounds the accepted
    Hermiticity defect, the most negative eigenvalue, and the trace error.
    """

    mat: np.ndarray
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        mat = _as_square(self.mat, "density matrix")
        if self.tol < 0:
            raise ValueError("tolerance must be non-negative")
        if hermiticity_defect(mat) > self.tol:
            raise ValueError("density matrix is not Hermitian within tolerance")
        herm = (mat + mat.conj().T) / 2.0
        if float(np.linalg.eigvalsh(herm)[0]) < -self.tol:
            raise ValueError("density matrix has a negative eigenvalue beyond tolerance")
        if abs(complex(np.trace(mat)) - 1.0) > self.tol:
            raise ValueError("density matrix trace differs from one beyond tolerance")
        mat = mat.copy()
        mat.setflags(write=False)
        object.__setattr__(self, "mat", mat)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]


def as_matrix(state) -> np.ndarray:
    """Coerce a DensityMatrix or array-like into a square complex ndarray."""
    if isinstance(state, DensityMatrix):
        return np.asarray(state.mat)
    return _as_square(state, "state")


def expm_flow(m):
    """Return a callable ``t -> exp(t*m)`` for repeated evaluation.

    When ``m`` is diagonalizable with a well conditioned eigenbasis the flow
    is evaluated from one eigendecomposition; otherwise each call falls back
    to :func:`mat_exp`.
    """
    m = _as_square(m)
    scale = max(1.0, float(np.max(np.abs(m))))
    try:
        w, v = np.linalg.eig(m)
        vinv = np.linalg.inv(v)
        err = float(np.max(np.abs((v * w) @ vinv - m)))
    except np.linalg.LinAlgError:
        err = np.inf
    if err <= 1e-12 * scale:
        def flow(t: float) -> np.ndarray:
            return (v * np.exp(t * w)) @ vinv
    else:
        def flow(t: float) -> np.ndarray:
            return scipy.linalg.expm(t * m)
    return flow

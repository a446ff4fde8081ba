"""Superoperators for open-system dynamics.

Builds the matrix representations (column-stacking convention) of the maps
that drive everything else in the package:

* the full Lindblad generator,
* the completely positive jump part ``sigma -> sum_k L_k sigma L_k^dag``,
* the trace-decreasing relaxation semigroup ``sigma -> exp(tR) sigma exp(tR)^dag``
  with ``R = -iH - (1/2) sum_k L_k^dag L_k`` (hbar = 1),

plus normalization of map outputs into states, Choi matrices, CPTP
certification and detection of jump maps with a fixed output state.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .qmatrix import (
    DEFAULT_TOL,
    DensityMatrix,
    _as_square,
    as_matrix,
    devectorize,
    hermiticity_defect,
    mat_exp,
    vectorize,
)

NULL_TOL = 1e-14
FIXED_OUTPUT_RANK_TOL = 1e-10


class NullOutcome(RuntimeError):
    """A map sent the state to (numerically) zero: the trajectory has measure zero."""


@dataclass(frozen=True)
class SuperOperator:
    """Linear map on operators, stored as a dim**2 x dim**2 matrix.

    The matrix acts on column-stacked operators, so composition of maps is
    plain matrix multiplication of the representations.
    """

    mat: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.mat, dtype=complex)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"superoperator matrix must be square, got {mat.shape}")
        dim = int(round(np.sqrt(mat.shape[0])))
        if dim * dim != mat.shape[0]:
            raise ValueError("superoperator side length must be a perfect square")
        if not np.all(np.isfinite(mat.view(float))):
            raise ValueError("superoperator contains non-finite entries")
        mat = mat.copy()
        mat.setflags(write=False)
        object.__setattr__(self, "mat", mat)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.mat.shape[0])))

    def apply(self, sigma) -> np.ndarray:
        return devectorize(self.mat @ vectorize(as_matrix(sigma)))

    def __matmul__(self, other: "SuperOperator") -> "SuperOperator":
        return SuperOperator(self.mat @ other.mat)

    def __add__(self, other: "SuperOperator") -> "SuperOperator":
        return SuperOperator(self.mat + other.mat)

    @staticmethod
    def identity(dim: int) -> "SuperOperator":
        return SuperOperator(np.eye(dim * dim, dtype=complex))

    @staticmethod
    def sandwich(a, b) -> "SuperOperator":
        """Map ``sigma -> a sigma b``."""
        a = _as_square(a)
        b = _as_square(b)
        return SuperOperator(np.kron(b.T, a))

    @staticmethod
    def conjugation(a) -> "SuperOperator":
        """Map ``sigma -> a sigma a^dag``."""
        a = _as_square(a)
        return SuperOperator(np.kron(a.conj(), a))

    @staticmethod
    def from_kraus(ops) -> "SuperOperator":
        ops = [_as_square(op, "Kraus operator") for op in ops]
        if not ops:
            raise ValueError("at least one Kraus operator is required")
        mat = sum(np.kron(op.conj(), op) for op in ops)
        return SuperOperator(mat)


class LindbladGenerator:
    """Hamiltonian plus jump operators; hbar = 1, all rates dimensionless."""

    def __init__(self, hamiltonian, jump_ops=(), tol: float = DEFAULT_TOL):
        h = _as_square(hamiltonian, "Hamiltonian")
        if hermiticity_defect(h) > tol:
            raise ValueError("Hamiltonian is not Hermitian within tolerance")
        ops = tuple(_as_square(op, "jump operator") for op in jump_ops)
        for op in ops:
            if op.shape != h.shape:
                raise ValueError("jump operator dimension does not match the Hamiltonian")
        self.hamiltonian = h
        self.jump_ops = ops
        self.tol = tol

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @cached_property
    def relaxation_op(self) -> np.ndarray:
        """The non-Hermitian drift ``R = -iH - (1/2) sum_k L_k^dag L_k``."""
        r = -1j * self.hamiltonian.astype(complex)
        for op in self.jump_ops:
            r = r - 0.5 * (op.conj().T @ op)
        return r


def liouvillian(gen: LindbladGenerator) -> SuperOperator:
    """Matrix of ``rho -> -i[H, rho] + sum_k (L_k rho L_k^dag - (1/2){L_k^dag L_k, rho})``."""
    h = gen.hamiltonian
    eye = np.eye(gen.dim, dtype=complex)
    mat = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for op in gen.jump_ops:
        anti = op.conj().T @ op
        mat = mat + np.kron(op.conj(), op)
        mat = mat - 0.5 * np.kron(eye, anti) - 0.5 * np.kron(anti.T, eye)
    return SuperOperator(mat)


def jump_superop(gen: LindbladGenerator) -> SuperOperator:
    """Completely positive jump part ``sigma -> sum_k L_k sigma L_k^dag``."""
    dim = gen.dim
    mat = np.zeros((dim * dim, dim * dim), dtype=complex)
    for op in gen.jump_ops:
        mat = mat + np.kron(op.conj(), op)
    return SuperOperator(mat)


def relaxation_drift_superop(gen: LindbladGenerator) -> SuperOperator:
    """Matrix of ``sigma -> R sigma + sigma R^dag``; the non-jump part of the generator."""
    r = gen.relaxation_op
    eye = np.eye(gen.dim, dtype=complex)
    return SuperOperator(np.kron(eye, r) + np.kron(r.conj(), eye))


def relaxation_semigroup(gen: LindbladGenerator, t: float) -> SuperOperator:
    """Matrix of ``sigma -> exp(tR) sigma exp(tR)^dag``, trace-nonincreasing for t >= 0."""
    if t < 0:
        raise ValueError("time must be non-negative")
    e = mat_exp(t * gen.relaxation_op)
    return SuperOperator(np.kron(e.conj(), e))


def normalize_apply(s: SuperOperator, sigma) -> DensityMatrix:
    """Apply a map and renormalize the output to unit trace.

    Raises :class:`NullOutcome` when the output trace falls at or below the
    null threshold (1e-14): the corresponding trajectory has zero weight and
    a conditional state does not exist.
    """
    out = s.apply(sigma)
    tr = float(np.trace(out).real)
    if tr <= NULL_TOL:
        raise NullOutcome(f"map output trace {tr:.3e} is at or below the null threshold")
    out = (out + out.conj().T) / (2.0 * tr)
    return DensityMatrix(out)


def choi(s: SuperOperator) -> np.ndarray:
    """Choi matrix ``sum_ij s(|i><j|) (x) |i><j|``; PSD iff s is completely positive."""
    dim = s.dim
    out = np.zeros((dim * dim, dim * dim), dtype=complex)
    unit = np.zeros((dim, dim), dtype=complex)
    for i in range(dim):
        for j in range(dim):
            unit[i, j] = 1.0
            out += np.kron(s.apply(unit), unit)
            unit[i, j] = 0.0
    return out


def tp_defect(s: SuperOperator) -> float:
    """Max-abs violation of the trace-dual condition (adjoint map fixing the identity)."""
    vec_eye = vectorize(np.eye(s.dim, dtype=complex))
    return float(np.max(np.abs(s.mat.conj().T @ vec_eye - vec_eye)))


@dataclass(frozen=True)
class CptpReport:
    is_tp: bool
    is_cp: bool
    min_choi_eigenvalue: float
    tp_defect: float


def certify_cptp(s: SuperOperator, tol: float = 1e-8) -> CptpReport:
    """Certify complete positivity (via the Choi spectrum) and trace preservation."""
    c = choi(s)
    herm_defect = hermiticity_defect(c)
    scale = max(1.0, float(np.max(np.abs(c))))
    min_eig = float(np.linalg.eigvalsh((c + c.conj().T) / 2.0)[0])
    defect = tp_defect(s)
    is_cp = min_eig >= -tol and herm_defect <= tol * scale
    return CptpReport(is_tp=defect <= tol, is_cp=is_cp,
                      min_choi_eigenvalue=min_eig, tp_defect=defect)


def fixed_output_detect(j: SuperOperator, tol: float = FIXED_OUTPUT_RANK_TOL) -> DensityMatrix | None:
    """Detect whether a completely positive map has a fixed output state.

    Returns the state ``rho_bar`` with ``j(sigma) = rho_bar * Tr(j(sigma))``
    when the map matrix has numerical rank one (second singular value at most
    ``tol`` times the first), and None otherwise.
    """
    u, sv, _ = np.linalg.svd(j.mat)
    if sv[0] <= NULL_TOL:
        return None
    if sv.size > 1 and sv[1] / sv[0] > tol:
        return None
    cand = devectorize(u[:, 0])
    tr = complex(np.trace(cand))
    if abs(tr) <= 1e-8:
        return None
    cand = cand / tr
    cand = (cand + cand.conj().T) / 2.0
    try:
        return DensityMatrix(cand, tol=1e-8)
    except ValueError:
        return None

"""Non-Markovian collisional dynamics from three independent ingredients.

A collisional model is built from a family of completely positive
intercollision evolutions F(t) with F(0) = identity, a CPTP collision
channel E applied at jump times, and a waiting-time distribution whose
renewal process places the jumps.  The evolved state is the average over
jump trajectories of the chain F(t - t_n) E ... E F(t_1) applied to the
initial state, weighted by the jump-time density that puts the survival
factor on the first interval.

Four solvers evaluate the same dynamics and cross-validate each other:

* ``series_solve``   truncated trajectory series by iterated convolution,
* ``volterra_solve`` trapezoid marching of the second-kind integral equation
                     ``rho(t) = g(t) F(t) rho0 + int_0^t f(t-s) F(t-s) E rho(s) ds``,
* ``laplace_solve``  resolvent inversion ``[1 - (fF)^(u) E]^{-1} (gF)^(u)``
                     brought back to the time domain on a fixed Talbot contour,
* ``mc_solve``       Monte Carlo average over sampled renewal trajectories.

``integrodiff_residual`` checks any solution against the equivalent closed
integro-differential (memory kernel) equation, and ``certify_dynamics``
reconstructs the propagator column by column and certifies it CPTP.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .channels import (
    CptpReport,
    LindbladGenerator,
    SuperOperator,
    certify_cptp,
    choi,
    liouvillian,
    tp_defect,
)
from .qmatrix import as_matrix, expm_flow, hermiticity_defect
from .renewal import Erlang, Exponential, Tabulated, WaitingTime
from .rng import index_chunks, sample_stream

SERIES_TAIL_TOL = 1e-8
SERIES_MAX_TERMS = 80
CPTP_MODEL_TOL = 1e-8


class SolverError(RuntimeError):
    """A deterministic solver could not produce a result."""


class StepSizeError(SolverError):
    """The grid is too coarse for a stable step; rerun with more steps."""


class ContourError(SolverError):
    """A Laplace contour node hit a resolvent singularity; rescale the contour."""


class UnsupportedModelError(ValueError):
    """The requested operation does not apply to this model."""


@dataclass(frozen=True)
class SolverGrid:
    """Uniform time grid on [0, t_max] with steps intervals (steps + 1 nodes)."""

    t_max: float
    steps: int

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.steps < 2:
            raise ValueError("steps must be at least two")

    @property
    def dt(self) -> float:
        return self.t_max / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.steps + 1)


@dataclass(frozen=True)
class LaplaceInversionConfig:
    """Fixed Talbot contour settings for the numerical inverse transform."""

    nodes: int = 32

    def __post_init__(self):
        if self.nodes < 8:
            raise ValueError("at least eight contour nodes are required")


class IntercollisionFamily:
    """Time-indexed family of superoperator matrices with F(0) = identity."""

    dim: int

    def at(self, t: float) -> np.ndarray:
        raise NotImplementedError


class SemigroupFamily(IntercollisionFamily):
    """F(t) = exp(t M) for the matrix M of a Lindblad generator."""

    def __init__(self, generator: LindbladGenerator):
        self.generator = generator
        self.dim = generator.dim
        self.mat = liouvillian(generator).mat
        self._flow = expm_flow(self.mat)

    def at(self, t: float) -> np.ndarray:
        return self._flow(t)


def identity_family(dim: int) -> SemigroupFamily:
    """The constant family F(t) = identity (zero generator)."""
    return SemigroupFamily(LindbladGenerator(np.zeros((dim, dim))))


class TabulatedFamily(IntercollisionFamily):
    """Superoperator matrices on a uniform time grid, linear in between.

    Linear interpolation of two CPTP maps is a convex combination and hence
    CPTP, so certifying the nodes certifies the whole family.
    """

    def __init__(self, times, mats, validate: bool = True, tol: float = CPTP_MODEL_TOL):
        times = np.asarray(times, dtype=float)
        mats = [m.mat if isinstance(m, SuperOperator) else np.asarray(m, dtype=complex) for m in mats]
        if times.ndim != 1 or times.size < 2 or len(mats) != times.size:
            raise ValueError("need one superoperator per grid node, at least two nodes")
        if times[0] != 0.0:
            raise ValueError("family grid must start at t = 0")
        steps = np.diff(times)
        if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-9 * steps[0]:
            raise ValueError("family grid must be uniform and increasing")
        self.times = times
        self.mats = np.stack(mats)
        self.dim = int(round(np.sqrt(self.mats.shape[1])))
        eye = np.eye(self.dim * self.dim)
        if np.max(np.abs(self.mats[0] - eye)) > 1e-8:
            raise ValueError("the family must start at the identity map")
        if validate:
            for k, mat in enumerate(self.mats):
                report = certify_cptp(SuperOperator(mat), tol)
                if not (report.is_cp and report.is_tp):
                    raise ValueError(f"family node {k} is not CPTP within tolerance")

    def at(self, t: float) -> np.ndarray:
        if t < 0 or t > self.times[-1] * (1 + 1e-12):
            raise ValueError("time outside the tabulated family range")
        step = self.times[1] - self.times[0]
        idx = min(int(t / step), self.times.size - 2)
        theta = (t - self.times[idx]) / step
        return (1.0 - theta) * self.mats[idx] + theta * self.mats[idx + 1]


class CollisionalModel:
    """Intercollision family, collision channel, and waiting time, dimension-checked."""

    def __init__(self, family: IntercollisionFamily, collision: SuperOperator,
                 wait: WaitingTime, validate: bool = True):
        if collision.dim != family.dim:
            raise ValueError("collision channel dimension does not match the family")
        if validate:
            report = certify_cptp(collision, CPTP_MODEL_TOL)
            if not (report.is_cp and report.is_tp):
                raise ValueError("collision channel is not CPTP within tolerance")
        self.family = family
        self.collision = collision
        self.wait = wait
        self.dim = family.dim


def _family_on_grid(family: IntercollisionFamily, ts: np.ndarray) -> np.ndarray:
    out = np.empty((ts.size, family.dim**2, family.dim**2), dtype=complex)
    for i, t in enumerate(ts):
        out[i] = family.at(t)
    return out


def count_probabilities(wait: WaitingTime, grid: SolverGrid, n_max: int) -> np.ndarray:
    """P(exactly k events by each grid time), k = 0..n_max, by convolution quadrature."""
    ts = grid.times
    dt = grid.dt
    f = np.array([wait.pdf(t) for t in ts])
    layer = np.array([wait.survival(t) for t in ts])
    out = [layer]
    for _ in range(n_max):
        nxt = np.zeros_like(layer)
        for i in range(1, ts.size):
            full = float(np.dot(f[: i + 1][::-1], layer[: i + 1]))
            nxt[i] = dt * (full - 0.5 * f[i] * layer[0] - 0.5 * f[0] * layer[i])
        layer = nxt
        out.append(layer)
    return np.stack(out)


def series_depth_for_tail(wait: WaitingTime, grid: SolverGrid,
                          tail_tol: float = SERIES_TAIL_TOL) -> int:
    """Smallest term count whose neglected event-count tail is below tail_tol."""
    probs = count_probabilities(wait, grid, 1)
    cumulative = probs[0][-1] + probs[1][-1]
    layer = probs[1]
    f = np.array([wait.pdf(t) for t in grid.times])
    dt = grid.dt
    n = 1
    while 1.0 - cumulative > tail_tol:
        n += 1
        if n > SERIES_MAX_TERMS:
            raise SolverError(
                f"series depth exceeded {SERIES_MAX_TERMS} terms before the "
                f"count tail fell below {tail_tol:g}; use volterra_solve")
        nxt = np.zeros_like(layer)
        for i in range(1, grid.times.size):
            full = float(np.dot(f[: i + 1][::-1], layer[: i + 1]))
            nxt[i] = dt * (full - 0.5 * f[i] * layer[0] - 0.5 * f[0] * layer[i])
        layer = nxt
        cumulative += layer[-1]
    return n


def series_solve(model: CollisionalModel, rho0, grid: SolverGrid,
                 n_max: int | None = None) -> np.ndarray:
    """Trajectory series truncated at n_max collisions, on the whole grid.

    Term zero is the survival-weighted free evolution g(t) F(t) rho0; term k
    convolves the density-weighted kernel f F against the collision channel
    applied to term k-1, all on the shared uniform grid with trapezoid
    weights.  When n_max is omitted it is chosen so the neglected event-count
    tail stays below 1e-8.
    """
    if n_max is None:
        n_max = series_depth_for_tail(model.wait, grid)
    elif n_max < 0:
        raise ValueError("n_max must be non-negative")
    ts = grid.times
    dt = grid.dt
    dim = model.dim
    fam = _family_on_grid(model.family, ts)
    f = np.array([model.wait.pdf(t) for t in ts])
    g = np.array([model.wait.survival(t) for t in ts])
    kernel = f[:, None, None] * fam
    e_mat = model.collision.mat
    rho_vec = as_matrix(rho0).reshape(-1, order="F")
    prev = g[:, None] * np.einsum("iab,b->ia", fam, rho_vec)
    total = prev.copy()
    for _ in range(n_max):
        fed = prev @ e_mat.T
        cur = np.zeros_like(prev)
        for i in range(1, ts.size):
            full = np.einsum("jab,jb->a", kernel[: i + 1][::-1], fed[: i + 1])
            cur[i] = dt * (full - 0.5 * (kernel[i] @ fed[0]) - 0.5 * (kernel[0] @ fed[i]))
        prev = cur
        total += cur
    return total.reshape(ts.size, dim, dim).transpose(0, 2, 1)


def volterra_solve(model: CollisionalModel, rho0, grid: SolverGrid) -> np.ndarray:
    """March the second-kind integral equation on the grid with trapezoid weights.

    The implicit half-weight diagonal term is resolved by a direct linear
    solve with the constant matrix ``1 - (dt/2) f(0) E``; global accuracy is
    second order in the step for smooth ingredients.
    """
    ts = grid.times
    dt = grid.dt
    dim = model.dim
    fam = _family_on_grid(model.family, ts)
    f = np.array([model.wait.pdf(t) for t in ts])
    g = np.array([model.wait.survival(t) for t in ts])
    kernel = f[:, None, None] * fam
    e_mat = model.collision.mat
    rho_vec = as_matrix(rho0).reshape(-1, order="F")
    forcing = g[:, None] * np.einsum("iab,b->ia", fam, rho_vec)
    implicit = np.eye(dim * dim) - 0.5 * dt * model.wait.density_at_zero * e_mat
    try:
        lu = scipy.linalg.lu_factor(implicit)
    except scipy.linalg.LinAlgError as exc:
        raise StepSizeError("implicit step is singular; rerun with a finer grid") from exc
    if 1.0 / np.linalg.cond(implicit) < 1e-12:
        raise StepSizeError("implicit step is near singular; rerun with a finer grid")
    states = np.empty((ts.size, dim * dim), dtype=complex)
    fed = np.empty_like(states)
    states[0] = rho_vec
    fed[0] = e_mat @ rho_vec
    for n in range(1, ts.size):
        full = np.einsum("jab,jb->a", kernel[1 : n + 1][::-1], fed[:n])
        known = forcing[n] + dt * (full - 0.5 * (kernel[n] @ fed[0]))
        states[n] = scipy.linalg.lu_solve(lu, known)
        fed[n] = e_mat @ states[n]
    return states.reshape(ts.size, dim, dim).transpose(0, 2, 1)


def _closed_form_transforms(model: CollisionalModel):
    """(fF)^(u) and (gF)^(u) for a semigroup family with exponential or Erlang waits."""
    m0 = model.family.mat
    eye = np.eye(m0.shape[0])
    wait = model.wait
    if isinstance(wait, Exponential):
        shape, rate = 1, wait.rate
    elif isinstance(wait, Erlang):
        shape, rate = wait.shape, wait.rate
    else:
        return None

    def transforms(u: complex):
        resolvent = np.linalg.inv((u + rate) * eye - m0)
        g_hat = np.zeros_like(m0)
        power = eye
        for j in range(1, shape + 1):
            power = power @ resolvent
            g_hat = g_hat + rate ** (j - 1) * power
        f_hat = rate**shape * power
        return f_hat, g_hat

    return transforms


def _quadrature_transforms(model: CollisionalModel):
    """Transforms by trapezoid quadrature on the available tabulated horizon."""
    ends = []
    points = 0
    if isinstance(model.wait, Tabulated):
        ends.append(model.wait.times[-1])
        points = max(points, model.wait.times.size)
    if isinstance(model.family, TabulatedFamily):
        ends.append(model.family.times[-1])
        points = max(points, model.family.times.size)
    if not ends:
        raise UnsupportedModelError(
            "Laplace transforms need a semigroup family with exponential or "
            "Erlang waits, or tabulated ingredients to integrate")
    ts = np.linspace(0.0, min(ends), max(points, 256))
    fam = _family_on_grid(model.family, ts)
    f = np.array([model.wait.pdf(t) for t in ts])
    g = np.array([model.wait.survival(t) for t in ts])

    def transforms(u: complex):
        phases = np.exp(-u * ts)
        f_hat = np.trapezoid(phases[:, None, None] * f[:, None, None] * fam, ts, axis=0)
        g_hat = np.trapezoid(phases[:, None, None] * g[:, None, None] * fam, ts, axis=0)
        return f_hat, g_hat

    return transforms


def laplace_transforms(model: CollisionalModel):
    """Callable ``u -> ((fF)^(u), (gF)^(u))``, closed form when available."""
    if isinstance(model.family, SemigroupFamily):
        closed = _closed_form_transforms(model)
        if closed is not None:
            return closed
    return _quadrature_transforms(model)


def resolvent_state(model: CollisionalModel, rho0, u: complex) -> np.ndarray:
    """Laplace-domain state ``[1 - (fF)^(u) E]^{-1} (gF)^(u) vec(rho0)``, devectorized."""
    transforms = laplace_transforms(model)
    f_hat, g_hat = transforms(u)
    dim = model.dim
    lhs = np.eye(dim * dim) - f_hat @ model.collision.mat
    rhs = g_hat @ as_matrix(rho0).reshape(-1, order="F")
    try:
        vec = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ContourError(f"resolvent is singular at u = {u}") from exc
    return vec.reshape(dim, dim).T.copy()


def laplace_solve(model: CollisionalModel, rho0, t_values,
                  config: LaplaceInversionConfig | None = None) -> np.ndarray:
    """Invert the resolvent solution on a fixed Talbot contour.

    The contour for each time t crosses the real axis at 2M/(5t) and wraps
    into the left half plane; both half-contours are evaluated explicitly so
    the inversion is exact for complex-valued originals as well (needed when
    propagating matrix units rather than states).
    """
    config = config or LaplaceInversionConfig()
    transforms = laplace_transforms(model)
    t_values = np.atleast_1d(np.asarray(t_values, dtype=float))
    if np.any(t_values < 0):
        raise ValueError("times must be non-negative")
    dim = model.dim
    eye = np.eye(dim * dim)
    e_mat = model.collision.mat
    rho_vec = as_matrix(rho0).reshape(-1, order="F")

    def rho_hat(u: complex) -> np.ndarray:
        f_hat, g_hat = transforms(u)
        try:
            return np.linalg.solve(eye - f_hat @ e_mat, g_hat @ rho_vec)
        except np.linalg.LinAlgError as exc:
            raise ContourError(f"resolvent is singular at contour node u = {u}") from exc

    m_nodes = config.nodes
    theta = np.arange(1, m_nodes) * np.pi / m_nodes
    cot = 1.0 / np.tan(theta)
    gamma = 1.0 + 1j * theta * (1.0 + cot**2) - 1j * cot
    out = np.empty((t_values.size, dim, dim), dtype=complex)
    for idx, t in enumerate(t_values):
        if t == 0.0:
            out[idx] = as_matrix(rho0)
            continue
        r = 2.0 * m_nodes / (5.0 * t)
        nodes = r * theta * (cot + 1j)
        acc = np.exp(r * t) * rho_hat(r)
        for k in range(m_nodes - 1):
            acc = acc + np.exp(t * nodes[k]) * gamma[k] * rho_hat(nodes[k])
            acc = acc + np.exp(t * np.conj(nodes[k])) * np.conj(gamma[k]) * rho_hat(np.conj(nodes[k]))
        vec = acc / (5.0 * t)
        if not np.all(np.isfinite(vec.view(float))):
            raise ContourError(f"contour evaluation overflowed at t = {t}; rescale the contour")
        out[idx] = vec.reshape(dim, dim).T
    return out


def integrodiff_residual(model: CollisionalModel, states, grid: SolverGrid) -> float:
    """Defect of a solution in the closed memory-kernel equation.

    Checks, at every interior grid node,
    ``d rho/dt = int_0^t (d/ds)[f F](t - tau) E rho(tau) dtau
    + f(0) E rho(t) + (d/dt)[g(t) F(t)] rho(0)``
    with central differences for the state derivative, trapezoid weights for
    the convolution, one-sided differences of the kernel at the window ends,
    and the exact product rule (using dg/dt = -f) for the last term.  For a
    trapezoid-marched solution the defect decays as the square of the step.
    """
    if grid.steps < 10:
        raise ValueError("residual check needs at least 10 steps")
    states = np.asarray(states, dtype=complex)
    ts = grid.times
    dt = grid.dt
    if states.shape[0] != ts.size:
        raise ValueError("solution length does not match the grid")
    dim = model.dim
    fam = _family_on_grid(model.family, ts)
    f = np.array([model.wait.pdf(t) for t in ts])
    g = np.array([model.wait.survival(t) for t in ts])
    kernel = f[:, None, None] * fam
    if isinstance(model.family, SemigroupFamily):
        fam_deriv = np.einsum("ab,ibc->iac", model.family.mat, fam)
    else:
        fam_deriv = np.empty_like(fam)
        fam_deriv[1:-1] = (fam[2:] - fam[:-2]) / (2.0 * dt)
        fam_deriv[0] = (fam[1] - fam[0]) / dt
        fam_deriv[-1] = (fam[-1] - fam[-2]) / dt
    central = (kernel[2:] - kernel[:-2]) / (2.0 * dt)
    backward = (kernel[1:] - kernel[:-1]) / dt
    forward0 = backward[0]
    vecs = states.transpose(0, 2, 1).reshape(ts.size, dim * dim)
    fed = vecs @ model.collision.mat.T
    rho0_vec = vecs[0]
    f0 = model.wait.density_at_zero
    worst = 0.0
    for n in range(1, ts.size - 1):
        lhs = (vecs[n + 1] - vecs[n - 1]) / (2.0 * dt)
        conv = 0.5 * dt * (backward[n - 1] @ fed[0]) + 0.5 * dt * (forward0 @ fed[n])
        if n >= 2:
            conv = conv + dt * np.einsum("jab,jb->a", central[: n - 1], fed[1:n][::-1])
        last = (-f[n] * fam[n] + g[n] * fam_deriv[n]) @ rho0_vec
        rhs = conv + f0 * fed[n] + last
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def mc_solve(model: CollisionalModel, rho0, t: float, n_samples: int, seed: int,
             direction: str = "reverse", workers: int = 1,
             stream_offset: int = 0) -> np.ndarray:
    """Monte Carlo average of collision chains over sampled renewal trajectories.

    With ``reverse`` sampling the trajectory law matches the series weights
    exactly; ``forward`` estimates the conventional mirrored ordering instead
    (the two coincide whenever only the jump count matters).  Deterministic
    for a fixed seed and any worker count.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least one")
    if t < 0:
        raise ValueError("time must be non-negative")
    from .renewal import sample_renewal  # local import to avoid cycle at module load

    family = model.family
    e_mat = model.collision.mat
    rho_vec = as_matrix(rho0).reshape(-1, order="F")
    dim = model.dim
    out = np.empty((n_samples, dim * dim), dtype=complex)

    def run(indices: range) -> None:
        for i in indices:
            traj = sample_renewal(model.wait, t, sample_stream(seed, stream_offset + i), direction)
            vec = rho_vec
            prev = 0.0
            for tj in traj.jump_times:
                vec = e_mat @ (family.at(tj - prev) @ vec)
                prev = tj
            out[i] = family.at(t - prev) @ vec

    chunks = index_chunks(n_samples, workers)
    if len(chunks) == 1:
        run(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(run, chunks))
    mean = out.mean(axis=0)
    return mean.reshape(dim, dim).T.copy()


def markov_limit_generator(model: CollisionalModel) -> SuperOperator:
    """Semigroup generator reproduced by exponential waits over a semigroup family.

    Differentiating the integral equation for an exponential waiting time
    with rate lambda gives the closed generator M0 + lambda (E - 1); the
    marched solution must match its matrix exponential.
    """
    if not isinstance(model.wait, Exponential):
        raise UnsupportedModelError("the closed generator exists only for exponential waits")
    if not isinstance(model.family, SemigroupFamily):
        raise UnsupportedModelError("the closed generator needs a semigroup family")
    eye = np.eye(model.dim**2)
    mat = model.family.mat + model.wait.rate * (model.collision.mat - eye)
    return SuperOperator(mat)


def _report(mat: np.ndarray, cp_tol: float, tp_tol: float) -> CptpReport:
    s = SuperOperator(mat)
    c = choi(s)
    min_eig = float(np.linalg.eigvalsh((c + c.conj().T) / 2.0)[0])
    herm = hermiticity_defect(c) <= cp_tol * max(1.0, float(np.max(np.abs(c))))
    defect = tp_defect(s)
    return CptpReport(is_tp=defect <= tp_tol, is_cp=(min_eig >= -cp_tol and herm),
                      min_choi_eigenvalue=min_eig, tp_defect=defect)


def certify_dynamics(model: CollisionalModel, solver: str, grid: SolverGrid,
                     sample_times, cp_tol: float = 1e-8,
                     tp_tol: float = 1e-6) -> list[CptpReport]:
    """Reconstruct the propagator at sample times and certify it CPTP.

    The solvers are linear in the initial operator, so evolving every matrix
    unit fills the propagator column by column.  Grid-based solvers snap the
    sample times to the nearest node.
    """
    if solver not in ("series", "volterra", "laplace"):
        raise ValueError("solver must be one of series, volterra, laplace")
    sample_times = np.atleast_1d(np.asarray(sample_times, dtype=float))
    dim = model.dim
    if solver == "laplace":
        def evolve(unit):
            return laplace_solve(model, unit, sample_times)
        time_index = None
    else:
        ts = grid.times
        time_index = np.array([int(round(t / grid.dt)) for t in sample_times])
        if np.any(time_index < 0) or np.any(time_index > grid.steps):
            raise ValueError("sample times fall outside the grid")
        if np.max(np.abs(ts[time_index] - sample_times)) > grid.dt / 2 + 1e-12:
            raise ValueError("sample times do not snap to grid nodes")
        if solver == "volterra":
            def evolve(unit):
                return volterra_solve(model, unit, grid)[time_index]
        else:
            depth = series_depth_for_tail(model.wait, grid)

            def evolve(unit):
                return series_solve(model, unit, grid, depth)[time_index]

    props = np.zeros((sample_times.size, dim * dim, dim * dim), dtype=complex)
    unit = np.zeros((dim, dim), dtype=complex)
    for i in range(dim):
        for j in range(dim):
            unit[i, j] = 1.0
            evolved = evolve(unit.copy())
            props[:, :, j * dim + i] = evolved.transpose(0, 2, 1).reshape(sample_times.size, -1)
            unit[i, j] = 0.0
    return [_report(props[k], cp_tol, tp_tol) for k in range(sample_times.size)]

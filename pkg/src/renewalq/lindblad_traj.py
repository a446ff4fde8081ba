"""Trajectory representation of Lindblad dynamics.

The solution of a Lindblad master equation can be written as a mixture over
jump trajectories: a no-jump weight times the relaxed-and-renormalized state,
plus, for every jump count n, the exclusive density of jumps at given times
multiplied by the conditional state obtained by alternating renormalized
relaxation and jump repreparations.  This module computes those weights and
states, evaluates the truncated series of nested time-ordered integrals by
iterated trapezoid convolution, samples trajectories by inverting the no-jump
survival probability, and reduces fixed-output jump maps to a renewal process.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .channels import LindbladGenerator, NullOutcome, NULL_TOL, fixed_output_detect, jump_superop
from .qmatrix import DensityMatrix, as_matrix, expm_flow
from .renewal import Trajectory
from .rng import index_chunks, sample_stream

BISECTION_U_TOL = 1e-12


@dataclass(frozen=True)
class PoissonReference:
    """Fixed-rate reference law assigning weight rate**n * exp(-rate*t) to n jumps."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")

    def weight(self, n_jumps: int, horizon: float) -> float:
        return float(self.rate**n_jumps * np.exp(-self.rate * horizon))


@dataclass(frozen=True)
class RenewalReduction:
    """Tabulated no-jump survival and jump density of a fixed-output jump map."""

    fixed_state: DensityMatrix
    times: np.ndarray
    survival: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        if abs(self.survival[0] - 1.0) > 1e-10:
            raise ValueError("survival must start at one")
        if np.any(np.diff(self.survival) > 1e-12):
            raise ValueError("survival must be non-increasing")
        if np.any(self.density < -1e-12):
            raise ValueError("density must be non-negative")


class _Workspace:
    """Cached spectral data of a generator for repeated chain evaluation."""

    def __init__(self, gen: LindbladGenerator):
        self.gen = gen
        self.dim = gen.dim
        self.jump_ops = gen.jump_ops
        r = gen.relaxation_op
        self.flow = expm_flow(r)
        scale = max(1.0, float(np.max(np.abs(r))))
        try:
            w, v = np.linalg.eig(r)
            vinv = np.linalg.inv(v)
            err = float(np.max(np.abs((v * w) @ vinv - r)))
        except np.linalg.LinAlgError:
            err = np.inf
        if err <= 1e-12 * scale:
            self._eig = (w, v, vinv)
            self._gram = v.conj().T @ v
        else:
            self._eig = None

    def relax(self, sigma: np.ndarray, t: float) -> np.ndarray:
        e = self.flow(t)
        return e @ sigma @ e.conj().T

    def jump(self, sigma: np.ndarray) -> np.ndarray:
        out = np.zeros_like(sigma)
        for op in self.jump_ops:
            out += op @ sigma @ op.conj().T
        return out

    def survival_fn(self, sigma: np.ndarray):
        """Callable ``tau -> Tr(exp(tau R) sigma exp(tau R)^dag)``."""
        if self._eig is None:
            relax = self.relax

            def slow(tau: float) -> float:
                return float(np.trace(relax(sigma, tau)).real)

            return slow
        w, _, vinv = self._eig
        b = vinv @ sigma @ vinv.conj().T
        coef = (self._gram.T * b).ravel()
        rates = np.add.outer(w, w.conj()).ravel()

        def fast(tau: float) -> float:
            return float((np.exp(rates * tau) @ coef).real)

        return fast

    def chain(self, rho0: np.ndarray, jump_times, horizon: float) -> np.ndarray:
        """Unnormalized alternating chain: relax to each jump, jump, relax to the horizon."""
        sigma = rho0
        prev = 0.0
        for tj in jump_times:
            sigma = self.jump(self.relax(sigma, tj - prev))
            prev = tj
        return self.relax(sigma, horizon - prev)


def survival_probability(gen: LindbladGenerator, rho0, t: float) -> float:
    """Probability of no jumps up to time t: the trace of the relaxed state."""
    if t < 0:
        raise ValueError("time must be non-negative")
    ws = _Workspace(gen)
    value = float(np.trace(ws.relax(as_matrix(rho0), t)).real)
    return min(max(value, 0.0), 1.0)


def exclusive_density(gen: LindbladGenerator, rho0, traj: Trajectory) -> float:
    """Density for exactly the given jumps and none in between, up to the horizon."""
    ws = _Workspace(gen)
    value = float(np.trace(ws.chain(as_matrix(rho0), traj.jump_times, traj.horizon)).real)
    return max(value, 0.0)


def _superop_offsets(ws: _Workspace, ts: np.ndarray) -> np.ndarray:
    """Relaxation superoperator matrices at every grid offset, stacked."""
    d = ws.dim
    out = np.empty((ts.size, d * d, d * d), dtype=complex)
    for i, t in enumerate(ts):
        e = ws.flow(t)
        out[i] = np.kron(e.conj(), e)
    return out


def dyson_terms(gen: LindbladGenerator, rho0, t: float, n_max: int,
                grid_points: int) -> list[np.ndarray]:
    """Value at time t of each term of the jump expansion, up to n_max jumps.

    Term k is the k-fold nested time-ordered integral of relaxation segments
    interleaved with jump applications.  The nested integrals are evaluated by
    iterated trapezoid convolution on a shared uniform grid: term k at every
    node reuses term k-1 on the same grid, so the total cost is
    O(n_max * grid_points**2) instead of exponential in n_max.
    """
    if t < 0:
        raise ValueError("time must be non-negative")
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    if grid_points < 2:
        raise ValueError("grid must have at least two points")
    rho0 = as_matrix(rho0)
    ws = _Workspace(gen)
    d = ws.dim
    if t == 0.0:
        return [rho0.copy()] + [np.zeros_like(rho0) for _ in range(n_max)]
    ts = np.linspace(0.0, t, grid_points)
    dt = t / (grid_points - 1)
    relax_ops = _superop_offsets(ws, ts)
    jump_mat = jump_superop(gen).mat
    prev = np.einsum("iab,b->ia", relax_ops, rho0.reshape(-1, order="F"))
    terms = [prev[-1].reshape((d, d), order="F").copy()]
    for _ in range(n_max):
        fed = prev @ jump_mat.T
        cur = np.zeros_like(prev)
        for i in range(1, grid_points):
            full = np.einsum("jab,jb->a", relax_ops[: i + 1][::-1], fed[: i + 1])
            cur[i] = dt * (full - 0.5 * (relax_ops[i] @ fed[0]) - 0.5 * fed[i])
        prev = cur
        terms.append(prev[-1].reshape((d, d), order="F").copy())
    return terms


def dyson_solve(gen: LindbladGenerator, rho0, t: float, n_max: int,
                grid_points: int) -> np.ndarray:
    """Truncated jump expansion of the evolved state; trace approaches one from below."""
    return sum(dyson_terms(gen, rho0, t, n_max, grid_points))


def trajectory_decompose(gen: LindbladGenerator, rho0,
                         traj: Trajectory) -> tuple[float, DensityMatrix]:
    """Weight and conditional state of one trajectory.

    The weight is the exclusive density of the trajectory; the state is the
    renormalized chain.  Their product reproduces the unnormalized chain, so
    integrating weight times state over all trajectories rebuilds the jump
    expansion term by term.
    """
    ws = _Workspace(gen)
    out = ws.chain(as_matrix(rho0), traj.jump_times, traj.horizon)
    weight = float(np.trace(out).real)
    if weight <= NULL_TOL:
        raise NullOutcome(f"trajectory weight {weight:.3e} is at or below the null threshold")
    state = (out + out.conj().T) / (2.0 * weight)
    return weight, DensityMatrix(state, tol=1e-8)


def demixture_reassemble(gen: LindbladGenerator, rho0, t: float, n_max: int = 2,
                         grid_points: int = 1001, pair_grid_points: int | None = None) -> np.ndarray:
    """Rebuild the evolved state from weighted conditional states on a quadrature grid.

    Integrates weight times conditional state (their product is the
    unnormalized chain) over the no-jump, one-jump and two-jump trajectory
    sets with trapezoid weights.  Desk-scale verification tool: n_max <= 2.
    """
    if n_max < 0 or n_max > 2:
        raise ValueError("trajectory-space quadrature supports n_max <= 2")
    rho0 = as_matrix(rho0)
    ws = _Workspace(gen)
    total = ws.chain(rho0, (), t)
    if t == 0.0 or n_max == 0:
        return total
    ts = np.linspace(0.0, t, grid_points)
    dt = t / (grid_points - 1)
    weights = np.full(grid_points, dt)
    weights[0] = weights[-1] = dt / 2.0
    for i, t1 in enumerate(ts):
        total = total + weights[i] * ws.chain(rho0, (t1,), t)
    if n_max == 1:
        return total
    pairs = pair_grid_points or min(grid_points, 201)
    ps = np.linspace(0.0, t, pairs)
    dp = t / (pairs - 1)
    wp = np.full(pairs, dp)
    wp[0] = wp[-1] = dp / 2.0
    # coincident times on the simplex diagonal mean two jumps back to back,
    # which is the correct integrand limit there
    for i2, t2 in enumerate(ps):
        if i2 == 0:
            continue
        inner = np.zeros_like(rho0)
        for i1 in range(i2 + 1):
            w1 = dp if 0 < i1 < i2 else dp / 2.0
            inner = inner + w1 * ws.chain(rho0, (ps[i1], t2), t)
        total = total + wp[i2] * inner
    return total


def _invert_survival(survival, u: float, hi: float, scale: float) -> float:
    lo = 0.0
    width_tol = 1e-13 * max(1.0, scale)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        value = survival(mid)
        if abs(value - u) <= BISECTION_U_TOL:
            return mid
        if value > u:
            lo = mid
        else:
            hi = mid
        if hi - lo <= width_tol:
            break
    return 0.5 * (lo + hi)


def _sample_one(ws: _Workspace, rho0: np.ndarray, t: float,
                rng: np.random.Generator) -> tuple[list[float], np.ndarray]:
    sigma = rho0
    elapsed = 0.0
    times: list[float] = []
    while True:
        remain = t - elapsed
        u = rng.random()
        survival = ws.survival_fn(sigma)
        if survival(remain) > u:
            out = ws.relax(sigma, remain)
            tr = float(np.trace(out).real)
            return times, (out + out.conj().T) / (2.0 * tr)
        tau = _invert_survival(survival, u, remain, t)
        out = ws.jump(ws.relax(sigma, tau))
        tr = float(np.trace(out).real)
        if tr <= NULL_TOL:
            raise NullOutcome("jump from a state the jump map annihilates")
        sigma = (out + out.conj().T) / (2.0 * tr)
        elapsed += tau
        times.append(elapsed)


def sample_trajectory(gen: LindbladGenerator, rho0, t: float,
                      rng: np.random.Generator) -> tuple[Trajectory, DensityMatrix]:
    """Draw one trajectory and its conditional state.

    Sequentially from the current normalized state: draw u uniform, solve the
    monotone no-jump survival for the next jump time by bisection, apply the
    renormalized jump map, and repeat until the remaining horizon survives the
    draw, in which case the state relaxes to the horizon.  The empirical law
    of the trajectories converges to the exclusive densities.
    """
    if t < 0:
        raise ValueError("time must be non-negative")
    ws = _Workspace(gen)
    times, state = _sample_one(ws, as_matrix(rho0), t, rng)
    return Trajectory(t, tuple(times)), DensityMatrix(state, tol=1e-8)


def mc_average(gen: LindbladGenerator, rho0, t: float, n_samples: int, seed: int,
               workers: int = 1, stream_offset: int = 0) -> DensityMatrix:
    """Monte Carlo demixture: arithmetic mean of sampled conditional states.

    Converges to the semigroup solution at the usual inverse square-root
    rate.  Every sample runs on its own counter-based stream keyed by
    (seed, stream_offset + sample index) and the mean is accumulated in index
    order, so the result is bit-identical for any worker count.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least one")
    ws = _Workspace(gen)
    rho0 = as_matrix(rho0)
    out = np.empty((n_samples, ws.dim, ws.dim), dtype=complex)

    def run(indices: range) -> None:
        for i in indices:
            out[i] = _sample_one(ws, rho0, t, sample_stream(seed, stream_offset + i))[1]

    chunks = index_chunks(n_samples, workers)
    if len(chunks) == 1:
        run(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(run, chunks))
    mean = out.mean(axis=0)
    mean = (mean + mean.conj().T) / 2.0
    return DensityMatrix(mean, tol=1e-8)


def poisson_unnormalized_state(gen: LindbladGenerator, rho0, traj: Trajectory,
                               ref: PoissonReference) -> np.ndarray:
    """Unnormalized conditional state under a Poisson reference law.

    The chain is rescaled by the inverse reference weight, so reweighting by
    ``rate**n * exp(-rate*t)`` recovers the jump-expansion integrand exactly.
    """
    ws = _Workspace(gen)
    chain = ws.chain(as_matrix(rho0), traj.jump_times, traj.horizon)
    return chain / ref.weight(traj.n_jumps, traj.horizon)


def renewal_reduction(gen: LindbladGenerator, tol: float = 1e-10, t_max: float = 4.0,
                      points: int = 201) -> RenewalReduction | None:
    """Reduce a fixed-output jump map to its renewal description.

    When the jump map sends every state to a fixed output state, the
    exclusive densities factor into a product of a single waiting-time
    density over the jump gaps and a survival factor on the last stretch.
    Returns None when the jump map is not fixed-output.  The tabulated
    survival w0 and density w satisfy dw0/dt = -w; both that identity and the
    product form are verified numerically before returning.
    """
    rho_bar = fixed_output_detect(jump_superop(gen), tol)
    if rho_bar is None:
        return None
    ws = _Workspace(gen)
    bar = as_matrix(rho_bar)
    ts = np.linspace(0.0, t_max, points)

    def w0(t: float) -> float:
        return float(np.trace(ws.relax(bar, t)).real)

    def w(t: float) -> float:
        return float(np.trace(ws.jump(ws.relax(bar, t))).real)

    survival = np.array([w0(t) for t in ts])
    density = np.array([w(t) for t in ts])
    step = 1e-5
    for t in ts[1:-1][:: max(1, (points - 2) // 50)]:
        deriv = (w0(t + step) - w0(t - step)) / (2.0 * step)
        if abs(deriv + w(t)) > 1e-6:
            raise ArithmeticError("fixed-output reduction failed its derivative identity")
    check_rng = np.random.default_rng(0)
    for n_jumps in (1, 2, 3):
        times = tuple(sorted(check_rng.uniform(0.05, 0.95 * t_max, n_jumps)))
        traj = Trajectory(t_max, times)
        direct = exclusive_density(gen, rho_bar, traj)
        product = w0(t_max - times[-1]) * w(times[0])
        for a, b in zip(times, times[1:]):
            product *= w(b - a)
        if abs(direct - product) > 1e-8 * max(1.0, abs(direct)):
            raise ArithmeticError("fixed-output reduction failed its product-form check")
    return RenewalReduction(fixed_state=rho_bar, times=ts, survival=survival, density=density)

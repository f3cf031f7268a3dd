"""Free energy, closed-form theory values, and the radial gradient flow.

The free energy

    F(rho) = 1/(p-1) int rho^p - chi/2 D(rho, rho)

is dissipated by the aggregation-diffusion equation
d rho/dt = div(rho grad dF/drho), dF/drho = p/(p-1) rho^(p-1) - chi Phi_rho,
while the mass M is conserved.  With alpha = lambda/(d(p-1)):

    alpha < 1:  F_M = (d/lambda)(alpha - 1) P_M,
                P_M = (chi lambda a M^(2 - p alpha) / (2d))^(1/(1-alpha)),
                attained exactly by the optimizer rescaled so that
                int rho^p = P_M;
    alpha = 1:  F_M = 0 for M <= M_c and -inf above, with the critical mass
                M_c = (2d/(chi lambda a))^(d/(d-lambda));
    alpha > 1:  F_M = -inf.

The flow solver is a conservative finite-volume scheme in the radial
variable: interface fluxes r^(d-1) rho_up d_r(dF/drho) with the upwind side
chosen by the velocity sign, zero-flux boundaries, and explicit Euler steps
accepted only when the discrete free energy does not increase beyond a
1e-10 relative slack (dt halves and retries otherwise).  Mass conservation is
exact up to floating-point summation by the telescoping flux form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceError
from .optimizer import OptimizerSolution
from .radial_core import Params, RadialProfile, integrate, rescale, sphere_area
from .riesz_kernel import channel_kernel, pair_energy

__all__ = [
    "TheoryValues",
    "FlowState",
    "FlowTrace",
    "StopRule",
    "free_energy",
    "theory_values",
    "scale_to_Lchi",
    "g_alpha",
    "corollary_gap",
    "flow_step",
    "run_flow",
    "mass_normalize",
    "flow_state_from_profile",
    "flow_trace_csv",
]

ENERGY_SLACK = 1e-10       # relative non-increase slack per accepted step
DT_GROWTH = 1.05           # growth factor after an accepted streak
GROWTH_STREAK = 8
DT_UNDERFLOW = 1e-12       # relative to max(t, initial dt)


@dataclass(frozen=True)
class TheoryValues:
    """Closed-form minimal free energy and its companions.

    F_M is -inf in the unbounded-below regimes; P_M and M_c are None outside
    their regimes of definition (P_M needs alpha < 1, M_c needs alpha = 1).
    """

    alpha_exp: float
    F_M: float
    M_c: float | None
    P_M: float | None


def free_energy(rho: RadialProfile, params: Params) -> float:
    if np.any(rho.values < 0.0):
        raise ValueError("free energy requires a nonnegative profile")
    p = params.p
    internal = float(rho.grid.weights @ rho.values**p) / (p - 1.0)
    return internal - 0.5 * params.chi * pair_energy(rho, rho, params)


def theory_values(params: Params, a: float) -> TheoryValues:
    if not a > 0:
        raise ValueError("a must be positive")
    d, lam, p, chi, M = params.d, params.lam, params.p, params.chi, params.M
    alpha = lam / (d * (p - 1.0))
    if abs(alpha - 1.0) < 1e-12:
        M_c = (2.0 * d / (chi * lam * a)) ** (d / (d - lam))
        F_M = 0.0 if M <= M_c else -math.inf
        return TheoryValues(alpha_exp=alpha, F_M=F_M, M_c=M_c, P_M=None)
    if alpha > 1.0:
        return TheoryValues(alpha_exp=alpha, F_M=-math.inf, M_c=None, P_M=None)
    P_M = (chi * lam * a * M ** (2.0 - p * alpha) / (2.0 * d)) ** (1.0 / (1.0 - alpha))
    F_M = (d / lam) * (alpha - 1.0) * P_M
    return TheoryValues(alpha_exp=alpha, F_M=F_M, M_c=None, P_M=P_M)


def scale_to_Lchi(ell: RadialProfile, P: float, params: Params) -> RadialProfile:
    """The rescaled unit-mass optimizer ell_chi with int ell_chi^p = P:
    kappa = (P^{-1} int ell^p)^(-1/(d(p-1))), ell_chi = kappa^d ell(kappa x)."""
    if not P > 0:
        raise ValueError("P must be positive")
    p, d = params.p, ell.grid.d
    int_p = float(ell.grid.weights @ ell.values**p)
    kappa = (int_p / P) ** (-1.0 / (d * (p - 1.0)))
    return rescale(ell, kappa)


def g_alpha(x, alpha_exp: float):
    """g(x) = x - x^alpha/alpha + 1/alpha - 1, nonnegative for x >= 0 and
    vanishing only at x = 1 (alpha < 1)."""
    if not alpha_exp < 1.0:
        raise ValueError("g_alpha requires alpha_exp < 1")
    if not alpha_exp > 0.0:
        raise ValueError("g_alpha requires alpha_exp > 0")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise ValueError("g_alpha requires x >= 0")
    out = x - x**alpha_exp / alpha_exp + 1.0 / alpha_exp - 1.0
    return float(out) if out.ndim == 0 else out


def corollary_gap(rho: RadialProfile, sol: OptimizerSolution, params: Params) -> dict:
    """lhs = F(rho) - F_1, distance_sq to the preferred-scale optimizer, and
    their quotient (radial case: the single center-fixed ell_chi)."""
    mass = integrate(rho)
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"corollary_gap requires unit mass, got {mass:.12g}")
    tv = theory_values(replace_mass(params, 1.0), sol.a)
    if tv.P_M is None:
        raise ValueError("corollary_gap requires the subcritical regime alpha < 1")
    ell_chi = scale_to_Lchi(sol.ell, tv.P_M, params)
    p = params.p
    lhs = free_energy(rho, params) - tv.F_M
    dist = float(rho.grid.weights @ (rho.values ** (0.5 * p)
                                     - ell_chi.values ** (0.5 * p)) ** 2)
    flagged = dist < 1e-12
    return {
        "lhs": lhs,
        "distance_sq": dist,
        "quotient": lhs / dist if not flagged else float("nan"),
        "flagged": flagged,
    }


def replace_mass(params: Params, M: float) -> Params:
    return Params(d=params.d, lam=params.lam, p=params.p, chi=params.chi, M=M)




@dataclass(frozen=True)
class FlowState:
    rho: RadialProfile
    t: float
    energy: float
    dt: float
    # cached interaction potential of rho (one kernel apply per step)
    phi: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def mass(self) -> float:
        return integrate(self.rho)


@dataclass(frozen=True)
class StopRule:
    """Converged when |F_k - F_{k-1}| < tol |F_k| over `window` consecutive
    accepted steps; hard cap at max_steps."""

    tol: float = 1e-9
    window: int = 40
    max_steps: int = 200_000


@dataclass(frozen=True)
class FlowTrace:
    rows: tuple           # (t, energy, mass, dt, accepted) per attempt
    final: FlowState
    status: str           # converged | budget_exhausted | unresolved_concentration
    mass_drift: float

    def energies(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows if r[4]])


def flow_state_from_profile(rho: RadialProfile, params: Params, dt: float) -> FlowState:
    kern = channel_kernel(params, rho.grid, 0)
    phi = kern.apply(rho.values)
    energy = _energy_with_phi(rho.values, phi, rho.grid, params)
    return FlowState(rho=rho, t=0.0, energy=energy, dt=dt, phi=phi)


def _energy_with_phi(values: np.ndarray, phi: np.ndarray, grid, params: Params) -> float:
    p = params.p
    internal = float(grid.weights @ values**p) / (p - 1.0)
    return internal - 0.5 * params.chi * float(grid.weights @ (values * phi))


def _fluxes(values: np.ndarray, phi: np.ndarray, grid, params: Params) -> np.ndarray:
    """Outward mass flux through each interior cell edge (upwind)."""
    p = params.p
    xi = p / (p - 1.0) * values ** (p - 1.0) - params.chi * phi
    r = grid.nodes
    u = -(xi[1:] - xi[:-1]) / (r[1:] - r[:-1])
    rho_up = np.where(u > 0.0, values[:-1], values[1:])
    area = sphere_area(grid.d) * grid.edges[1:-1] ** (grid.d - 1)
    return area * rho_up * u


def flow_step(state: FlowState, params: Params):
    """One accepted explicit step; dt halves until the energy certificate and
    positivity hold.  Returns (new_state, rejected_dts)."""
    grid = state.rho.grid
    kern = channel_kernel(params, grid, 0)
    values = state.rho.values
    w = grid.weights
    phi = state.phi if state.phi is not None else kern.apply(values)
    F = _fluxes(values, phi, grid, params)
    dm = np.zeros_like(values)
    dm[:-1] -= F
    dm[1:] += F
    dm /= w
    dt = state.dt
    rejected = []
    floor = DT_UNDERFLOW * max(state.t, state.dt)
    while True:
        new_vals = values + dt * dm
        if np.min(new_vals) >= 0.0:
            new_phi = kern.apply(new_vals)
            new_energy = _energy_with_phi(new_vals, new_phi, grid, params)
            if new_energy <= state.energy + ENERGY_SLACK * abs(state.energy):
                break
        rejected.append(dt)
        dt *= 0.5
        if dt < floor:
            raise ConvergenceError(
                f"flow time step underflow (dt = {dt:.3e} at t = {state.t:.6g})"
            )
    new_state = FlowState(rho=state.rho.with_values(new_vals), t=state.t + dt,
                          energy=new_energy, dt=dt, phi=new_phi)
    return new_state, rejected


def run_flow(init: FlowState, params: Params, stop: StopRule = StopRule()) -> FlowTrace:
    """Advance until the energy flattens, the step budget is exhausted, or the
    density concentrates below grid resolution (labeled, not asserted as
    blow-up)."""
    grid = init.rho.grid
    h_min = float(np.min(np.diff(grid.edges)))
    mass0 = init.mass
    # density at which the cell mass profile cannot be represented: all the
    # mass inside a 3-cell-radius ball
    rho_cap = mass0 / (sphere_area(grid.d) / grid.d * (3.0 * h_min) ** grid.d)

    rows = []
    state = init
    rows.append((state.t, state.energy, state.mass, state.dt, 1))
    flat = 0
    streak = 0
    status = "budget_exhausted"
    for _ in range(stop.max_steps):
        prev_energy = state.energy
        new_state, rejected = flow_step(state, params)
        for bad_dt in rejected:
            rows.append((state.t, state.energy, state.mass, bad_dt, 0))
        state = new_state
        rows.append((state.t, state.energy, state.mass, state.dt, 1))
        streak = streak + 1 if not rejected else 0
        if streak >= GROWTH_STREAK:
            state = replace(state, dt=state.dt * DT_GROWTH)
            streak = 0
        if float(np.max(state.rho.values)) > rho_cap:
            status = "unresolved_concentration"
            break
        if abs(state.energy - prev_energy) < stop.tol * abs(state.energy):
            flat += 1
            if flat >= stop.window:
                status = "converged"
                break
        else:
            flat = 0
    drift = abs(state.mass - mass0) / mass0
    return FlowTrace(rows=tuple(rows), final=state, status=status, mass_drift=drift)


def mass_normalize(rho: RadialProfile, chi: float, M: float, *, p: float):
    """(rho_tilde, chi_tilde) = (rho/M, M^(2-p) chi): the unit-mass form of
    the flow.  Evolving rho_tilde for a time t matches evolving rho for
    M^(1-p) t."""
    if not M > 0:
        raise ValueError("M must be positive")
    return rho.with_values(rho.values / M), M ** (2.0 - p) * chi


def flow_trace_csv(trace: FlowTrace) -> str:
    lines = ["t,energy,mass,dt,accepted"]
    for t, e, m, dt, acc in trace.rows:
        lines.append(f"{t:.17g},{e:.17g},{m:.17g},{dt:.17g},{acc}")
    return "\n".join(lines) + "\n"

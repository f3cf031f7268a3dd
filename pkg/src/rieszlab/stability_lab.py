"""Stability measurements: deficit, manifold distance, quotients.

For a unit-mass density rho the deficit is

    deficit(rho) = int rho^p - (a^{-1} D(rho, rho))^(d(p-1)/lambda)

and the squared manifold distance is min over kappa of

    h(kappa) = int (rho^(p/2) - ell_kappa^(p/2))^2,
    ell_kappa(x) = kappa^d ell(kappa x),

restricted here to radial rho and centers fixed at the origin.  The quotient
deficit/distance^2 is the empirical stability constant; its epsilon -> 0
limit along a perturbation family rho_eps = ell + eps v (v mass-free,
supported inside supp ell) is predicted by the Hessian quadratic form:

    deficit = -eps^2 (d(p-1)/(lambda a)) <g, H g> + O(eps^3),
    distance^2 = eps^2 p^2 int ell^(p-1) g^2 + O(eps^3),   g = v/(2 sqrt ell),

provided v is orthogonal to the mass and dilation directions.  quotient_curve
measures the ladder and extrapolates; the Hessian prediction comes from
hessian_spec.hessian_form on the same grid, so discretization bias cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .hessian_spec import HessianContext, hessian_form
from .optimizer import OptimizerSolution
from .radial_core import RadialProfile, integrate, lp_norm
from .riesz_kernel import pair_energy

__all__ = [
    "DeficitReport",
    "PerturbationSpec",
    "deficit",
    "manifold_distance",
    "delta_X",
    "fp_function",
    "quotient_curve",
    "hessian_quotient_prediction",
    "seeded_directions",
    "deficit_reports_csv",
]

DEGENERATE_DISTANCE = 1e-12


@dataclass(frozen=True)
class DeficitReport:
    epsilon: float
    deficit: float
    distance_sq: float
    kappa_star: float
    quotient: float
    flagged: bool = False


@dataclass(frozen=True)
class PerturbationSpec:
    """A direction, an amplitude ladder, and the renormalization rule.

    renormalization = "mass_projection": rho_eps = [ell + eps g]_+ rescaled
    to unit mass (the only rule implemented)."""

    direction: RadialProfile
    epsilons: tuple = (1e-1, 1e-2, 10**-2.5, 1e-3)
    renormalization: str = "mass_projection"

    def __post_init__(self):
        if self.renormalization != "mass_projection":
            raise ValueError(f"unknown renormalization {self.renormalization!r}")
        object.__setattr__(self, "epsilons", tuple(sorted(self.epsilons, reverse=True)))


def deficit(rho: RadialProfile, sol: OptimizerSolution) -> float:
    mass = integrate(rho)
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"deficit requires unit mass, got {mass:.12g}")
    if np.any(rho.values < 0.0):
        raise ValueError("deficit requires a nonnegative profile")
    p = sol.params.p
    beta = sol.params.d * (p - 1.0) / sol.params.lam
    D = pair_energy(rho, rho, sol.params)
    return float(rho.grid.weights @ rho.values**p - (D / sol.a) ** beta)


def _h_of_kappa(rho_p2: np.ndarray, sol: OptimizerSolution, kappa: float) -> float:
    grid = sol.grid
    ellk = kappa ** grid.d * sol.ell.interp(kappa * grid.nodes)
    return float(grid.weights @ (rho_p2 - ellk ** (0.5 * sol.params.p)) ** 2)


def manifold_distance(rho: RadialProfile, sol: OptimizerSolution):
    """(kappa_star, distance_sq): minimize h over the dilation scale.

    Coarse log-spaced bracketing followed by Brent.  Raises RuntimeError when
    the minimum sits on the scan boundary (R_max too small or rho degenerate).
    Centers are fixed at the origin: radial inputs only.
    """
    rho_p2 = rho.values ** (0.5 * sol.params.p)
    kappas = np.logspace(-3, 3, 121)
    hs = np.array([_h_of_kappa(rho_p2, sol, k) for k in kappas])
    i = int(np.argmin(hs))
    if i == 0 or i == kappas.size - 1:
        raise RuntimeError(
            f"manifold distance minimizer hit the kappa bracket boundary "
            f"(kappa ~ {kappas[i]:.3g})"
        )
    res = minimize_scalar(
        lambda lk: _h_of_kappa(rho_p2, sol, math.exp(lk)),
        bracket=(math.log(kappas[i - 1]), math.log(kappas[i]), math.log(kappas[i + 1])),
        method="brent", options={"xtol": 1e-12},
    )
    kappa_star = float(math.exp(res.x))
    return kappa_star, float(res.fun)


def dilation_stationarity(rho: RadialProfile, sol: OptimizerSolution, kappa_star: float) -> float:
    """|<delta, generator>| / (|delta| |generator|) at kappa_star, where the
    generator is d/dkappa ell_kappa^(p/2): the first-order condition of the
    kappa-minimization."""
    grid = sol.grid
    p = sol.params.p
    ellk = kappa_star ** grid.d * sol.ell.interp(kappa_star * grid.nodes)
    delta = rho.values ** (0.5 * p) - ellk ** (0.5 * p)
    dk = 1e-6 * kappa_star
    ellp = (kappa_star + dk) ** grid.d * sol.ell.interp((kappa_star + dk) * grid.nodes)
    ellm = (kappa_star - dk) ** grid.d * sol.ell.interp((kappa_star - dk) * grid.nodes)
    gen = (ellp ** (0.5 * p) - ellm ** (0.5 * p)) / (2.0 * dk)
    w = grid.weights
    num = abs(float(w @ (delta * gen)))
    den = math.sqrt(float(w @ delta**2)) * math.sqrt(float(w @ gen**2)) + 1e-300
    return num / den


def delta_X(rho: RadialProfile, ell: RadialProfile, p: float):
    """delta = rho^(p/2) - ell^(p/2) and X = rho - ell - (2/p) ell^(1-p/2) delta.

    The pointwise bounds 0 <= X <= |delta|^(2/p) are exact for p <= 2; a
    violation beyond 1e-10 is an implementation bug and asserts."""
    if p > 2.0:
        raise ValueError("delta_X requires p <= 2")
    rv, ev = rho.values, ell.values
    delta = rv ** (0.5 * p) - ev ** (0.5 * p)
    supp = ev > 0.0
    wfac = np.zeros_like(ev)
    wfac[supp] = ev[supp] ** (1.0 - 0.5 * p) if p < 2.0 else 1.0
    X = rv - ev - (2.0 / p) * wfac * delta
    bound = np.abs(delta) ** (2.0 / p)
    assert np.all(X >= -1e-10), "convexity bound X >= 0 violated beyond 1e-10"
    assert np.all(X - bound <= 1e-10), "bound X <= |delta|^(2/p) violated beyond 1e-10"
    return rho.with_values(delta), rho.with_values(X)


def fp_function(x, p: float):
    """F_p(x) = (x^2 - 1 + p - p x^(2/p)) / (1 - x)^2 for x >= 0, with the
    removable singularity at x = 1 filled by its limit 2(p-1)/p."""
    if not 1.0 < p <= 2.0:
        raise ValueError("fp_function requires p in (1, 2]")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if np.any(x < 0.0):
        raise ValueError("fp_function requires x >= 0")
    out = np.empty_like(x)
    near = np.abs(x - 1.0) < 1e-5
    far = ~near
    xf = x[far]
    out[far] = (xf**2 - 1.0 + p - p * xf ** (2.0 / p)) / (1.0 - xf) ** 2
    # Taylor at x = 1: 2(p-1)/p + 2(2-p)(p-1)/(3p^2) e + (2-p)(p-1)(2-3p)/(6p^3) e^2
    e = x[near] - 1.0
    out[near] = (2.0 * (p - 1.0) / p
                 + 2.0 * (2.0 - p) * (p - 1.0) / (3.0 * p**2) * e
                 + (2.0 - p) * (p - 1.0) * (2.0 - 3.0 * p) / (6.0 * p**3) * e**2)
    return float(out[0]) if scalar else out


def perturbed_profile(sol: OptimizerSolution, direction: RadialProfile, eps: float) -> RadialProfile:
    """rho_eps = [ell + eps g]_+ rescaled to unit mass."""
    vals = np.maximum(sol.ell.values + eps * direction.values, 0.0)
    mass = float(sol.grid.weights @ vals)
    return sol.ell.with_values(vals / mass)


def hessian_quotient_prediction(ctx: HessianContext, direction: RadialProfile) -> float:
    """Quadratic-order quotient along rho_eps = ell + eps v (see module
    docstring): (d(p-1)/(lambda a)) (-<g,Hg>) / (p^2 int ell^(p-1) g^2)."""
    sol = ctx.sol
    p = sol.params.p
    ell = sol.ell.values
    supp = ell > 0.0
    g = np.zeros_like(ell)
    g[supp] = direction.values[supp] / (2.0 * np.sqrt(ell[supp]))
    form = hessian_form(ctx, sol.ell.with_values(g), m=0)
    denom = float(sol.grid.weights[supp] @ (ell[supp] ** (p - 1.0) * g[supp] ** 2))
    num = (sol.params.d * (p - 1.0) / (sol.params.lam * sol.a)) * (-form.value)
    return num / (p**2 * denom)


def quotient_curve(sol: OptimizerSolution, spec: PerturbationSpec,
                   ctx: HessianContext | None = None):
    """One DeficitReport per epsilon plus the extrapolated quotient.

    Returns (reports, extrapolated_quotient, prediction); prediction is None
    without a Hessian context.  Rows with distance_sq below the degeneracy
    threshold are flagged and excluded from the extrapolation."""
    reports = []
    for eps in spec.epsilons:
        rho = perturbed_profile(sol, spec.direction, eps)
        dfc = deficit(rho, sol)
        kappa_star, dist = manifold_distance(rho, sol)
        flag = dist < DEGENERATE_DISTANCE
        q = dfc / dist if not flag else float("nan")
        reports.append(DeficitReport(epsilon=eps, deficit=dfc, distance_sq=dist,
                                     kappa_star=kappa_star, quotient=q, flagged=flag))
    good = [r for r in reports if not r.flagged]
    extrapolated = float("nan")
    if len(good) >= 3:
        # quotient(eps) = q0 + c1 eps + c2 eps^2: weighted least squares
        e = np.array([r.epsilon for r in good])
        q = np.array([r.quotient for r in good])
        V = np.vander(e, 3, increasing=True)
        coef, *_ = np.linalg.lstsq(V, q, rcond=None)
        extrapolated = float(coef[0])
    elif len(good) >= 1:
        extrapolated = good[-1].quotient
    prediction = hessian_quotient_prediction(ctx, spec.direction) if ctx is not None else None
    return reports, extrapolated, prediction


def seeded_directions(sol: OptimizerSolution, count: int, seed: int,
                      n_bumps: int = 6) -> list:
    """Deterministic battery of smooth radial directions supported inside the
    optimizer support, orthogonal to the mass and dilation constraints.

    Each direction is a random combination of Gaussian bumps confined to
    r < 0.82 R_ell, with the two linear constraints solved inside the bump
    coefficient space (so confinement is exact)."""
    rng = np.random.default_rng(seed)
    grid = sol.grid
    p = sol.params.p
    r = grid.nodes
    R = sol.support_radius
    ell = sol.ell.values
    supp = ell > 0.0

    centers = np.linspace(0.08, 0.58, n_bumps) * R
    width = 0.09 * R
    bumps = np.exp(-0.5 * ((r[None, :] - centers[:, None]) / width) ** 2)
    # C^1 confinement window: keeps the directions inside the support bulk
    # without introducing kinks that inflate cubic Taylor terms
    window = np.maximum(1.0 - (r / (0.8 * R)) ** 4, 0.0) ** 2
    bumps *= window[None, :]

    # constraints: int v = 0 and int v c_dil = 0 with
    # c_dil = (p/2)[d ell^(p-1) + r (ell^(p-1))'/(p-1)]
    ellp1 = np.where(supp, ell ** (p - 1.0), 0.0)
    dp1 = np.gradient(ellp1, r, edge_order=2)
    dp1[~supp] = 0.0
    c_dil = 0.5 * p * (sol.params.d * ellp1 + r * dp1 / (p - 1.0))
    C = np.stack([grid.weights @ bumps.T, bumps @ (grid.weights * c_dil)])

    _, _, vh = np.linalg.svd(C)
    null = vh[2:]  # basis of the constraint null space in coefficient space
    out = []
    for _ in range(count):
        coef = null.T @ rng.standard_normal(null.shape[0])
        v = coef @ bumps
        scale = math.sqrt(float(grid.weights @ v**2))
        out.append(sol.ell.with_values(v / scale))
    return out


def deficit_reports_csv(reports) -> str:
    lines = ["epsilon,deficit,distance_sq,kappa_star,quotient"]
    for rep in reports:
        lines.append(f"{rep.epsilon:.17g},{rep.deficit:.17g},{rep.distance_sq:.17g},"
                     f"{rep.kappa_star:.17g},{rep.quotient:.17g}")
    return "\n".join(lines) + "\n"

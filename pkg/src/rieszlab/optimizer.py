"""Euler-Lagrange fixed point for the interaction-inequality optimizer.

The doubly normalized maximizer ell of D(rho, rho) over rho >= 0 with
||rho||_1 = ||rho||_p = 1 satisfies

    (p lam a / (2 d (p-1))) ell^(p-1) = [ell * |x|^(-lambda) - mu]_+

with a = D(ell, ell) and multiplier mu = a (1 - p lam / (2 d (p-1))).  The
solver iterates

    ell_new = c [Phi - mu]_+^(1/(p-1)),   Phi = ell * |x|^(-lambda),

where the scalar pair (c, mu) is resolved by an inner solve enforcing
||ell_new||_1 = ||ell_new||_p = 1: the ratio ||g_mu||_1 / ||g_mu||_p is
scale-free, so mu is a bracketed 1-D root (Brent) and c follows explicitly.
Iterates are blended with damping theta, halved whenever the residual rises.

Neither identity for a nor mu is imposed; they must emerge at convergence,
which cross-checks grid, kernel and solver jointly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, ParameterWindowError
from .radial_core import (
    Params,
    RadialGrid,
    RadialProfile,
    integrate,
    lp_norm,
    save_profile_csv,
)
from .riesz_kernel import channel_kernel, pair_energy

__all__ = [
    "SolveOptions",
    "OptimizerSolution",
    "solve_optimizer",
    "el_residual",
    "exterior_potential",
    "derived_constants",
    "save_solution_bundle",
]

SUPPORT_THRESHOLD = 1e-14  # support radius: largest node with ell > thr * max ell


@dataclass(frozen=True)
class SolveOptions:
    """damping: blend weight theta; tol: Euler-Lagrange sup-residual target.

    The residual is measured against the continuum prefactor, so its floor is
    set by the grid (O(h^2), about 1e-6 at N = 2000 on unit-size domains);
    pass a tol compatible with the resolution in use.
    """

    damping: float = 0.5
    max_iter: int = 400
    tol: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class OptimizerSolution:
    """Converged optimizer with its emergent constants and diagnostics."""

    ell: RadialProfile
    a: float
    mu: float
    support_radius: float
    residual: float
    params: Params
    grid: RadialGrid
    iterations: int = 0
    history: tuple = field(default=(), repr=False)  # (iter, residual, theta)

    @property
    def threshold(self) -> float:
        """Hessian spectral threshold 2 p lam a / d."""
        p = self.params
        return 2.0 * p.p * p.lam * self.a / p.d

    def potential_values(self) -> np.ndarray:
        kern = channel_kernel(self.params, self.grid, 0)
        return kern.apply(self.ell.values)

    def support_zero_crossing(self) -> float:
        """Radius where Phi - mu crosses zero, by linear interpolation.

        Sharper than the node-quantized support_radius; used by profile
        comparisons that need the support edge to O(h^2)."""
        h = self.potential_values() - self.mu
        idx = np.nonzero(h <= 0.0)[0]
        if idx.size == 0:
            return self.grid.R_max
        i = idx[0]
        if i == 0:
            return self.grid.nodes[0]
        r0, r1 = self.grid.nodes[i - 1], self.grid.nodes[i]
        h0, h1 = h[i - 1], h[i]
        return float(r0 + (r1 - r0) * h0 / (h0 - h1))


def _normalized_update(phi: np.ndarray, grid: RadialGrid, p: float):
    """Resolve (c, mu) with ||c g_mu||_1 = ||c g_mu||_p = 1; return (ell_new, mu)."""
    w = grid.weights
    expo = 1.0 / (p - 1.0)
    phimax = float(np.max(phi))
    if phimax <= 0:
        raise ConvergenceError("potential is nonpositive; cannot normalize update")

    def ratio(mu):
        g = np.maximum(phi - mu, 0.0) ** expo
        n1 = w @ g
        npn = (w @ g**p) ** (1.0 / p)
        if npn == 0.0:
            return -1.0
        return np.log(n1 / npn)

    mu_hi = phimax * (1.0 - 1e-13)
    # ratio -> -inf as mu -> max(phi) (support shrinks to a point); find a
    # lower bracket with ratio > 0 by scanning down.
    mu_lo = None
    for frac in [0.9, 0.5, 0.2, 0.05, 1e-2, 1e-3, 1e-4, 1e-6, 0.0]:
        if ratio(phimax * frac) > 0.0:
            mu_lo = phimax * frac
            break
    if mu_lo is None:
        raise ConvergenceError(
            "cannot bracket the normalization multiplier; R_max is likely too small"
        )
    mu = brentq(ratio, mu_lo, mu_hi, xtol=1e-15 * phimax, rtol=8.9e-16)
    g = np.maximum(phi - mu, 0.0) ** expo
    return g / (w @ g), float(mu)


def solve_optimizer(params: Params, grid: RadialGrid,
                    opts: SolveOptions = SolveOptions()) -> OptimizerSolution:
    """Fixed-point solve for the doubly normalized optimizer.

    Raises ConvergenceError when max_iter is exhausted (with the last
    residual) or when the converged support touches 0.8 R_max.
    """
    params.require_stability_window()
    if grid.d != params.d:
        raise ValueError(f"grid dimension {grid.d} != params dimension {params.d}")
    kern = channel_kernel(params, grid, 0)
    w = grid.weights

    # truncated quadratic bump, doubly renormalized by construction below
    r0 = 0.5 * grid.R_max
    ell = np.maximum(1.0 - (grid.nodes / r0) ** 2, 0.0)
    ell /= w @ ell

    theta = opts.damping
    mu = float("nan")
    best_res = np.inf
    calm = 0
    history = []
    for it in range(1, opts.max_iter + 1):
        phi = kern.apply(ell)
        ell_new, mu = _normalized_update(phi, grid, params.p)
        a = float(w @ (ell * phi))
        scale = params.p * params.lam * a / (2.0 * params.d * (params.p - 1.0))
        res = float(np.max(np.abs(scale * ell ** (params.p - 1.0)
                                  - np.maximum(phi - mu, 0.0))) / a)
        history.append((it, res, theta))
        increment = float(np.max(np.abs(ell_new - ell)) / np.max(ell_new))
        if res <= opts.tol and increment < 1e-10:
            break
        if increment < 1e-13:
            if res <= opts.tol:
                break
            raise ConvergenceError(
                f"fixed point reached but residual {res:.3e} exceeds tol "
                f"{opts.tol:.1e}: the target is below the discretization floor; "
                f"increase N or relax tol"
            )
        # halve only on a genuine residual blow-up, not on floor noise;
        # recover toward the requested damping after a calm stretch
        if res > 10.0 * best_res and theta > 1.0 / 64.0:
            theta *= 0.5
            calm = 0
        else:
            calm += 1
            if calm >= 20 and theta < opts.damping:
                theta = min(opts.damping, 1.5 * theta)
                calm = 0
        best_res = min(best_res, res)
        ell = (1.0 - theta) * ell + theta * ell_new
        ell = np.maximum(ell, 0.0)
        ell /= w @ ell
    else:
        raise ConvergenceError(
            f"no convergence after {opts.max_iter} iterations; last residual {res:.3e}"
        )

    # final exactly-normalized state and emergent constants
    phi = kern.apply(ell)
    ell, mu = _normalized_update(phi, grid, params.p)
    ell /= w @ ell
    profile = RadialProfile(grid, ell)
    a = pair_energy(profile, profile, params)
    assert np.all(ell >= 0.0)

    nz = np.nonzero(ell > SUPPORT_THRESHOLD * np.max(ell))[0]
    support_radius = float(grid.nodes[nz[-1]]) if nz.size else 0.0
    if support_radius > 0.8 * grid.R_max:
        raise ConvergenceError(
            f"support radius {support_radius:.4g} exceeds 0.8 R_max = "
            f"{0.8 * grid.R_max:.4g}; rerun with a larger R_max"
        )

    sol = OptimizerSolution(
        ell=profile, a=a, mu=mu, support_radius=support_radius,
        residual=res, params=params, grid=grid, iterations=it,
        history=tuple(history),
    )
    return sol


def el_residual(sol: OptimizerSolution) -> float:
    """sup-norm Euler-Lagrange defect of a solution object, relative to a."""
    p = sol.params
    phi = sol.potential_values()
    scale = p.p * p.lam * sol.a / (2.0 * p.d * (p.p - 1.0))
    lhs = scale * sol.ell.values ** (p.p - 1.0)
    rhs = np.maximum(phi - sol.mu, 0.0)
    return float(np.max(np.abs(lhs - rhs)) / sol.a)


def exterior_potential(sol: OptimizerSolution) -> RadialProfile:
    """V_ell = [mu - ell * |x|^(-lambda)]_+, supported outside supp ell."""
    phi = sol.potential_values()
    return sol.ell.with_values(np.maximum(sol.mu - phi, 0.0))


def derived_constants(params: Params, a: float) -> dict:
    """Closed-form scalars attached to (params, a)."""
    if not a > 0:
        raise ValueError("a must be positive")
    d, lam, p = params.d, params.lam, params.p
    mu = a * (1.0 - p * lam / (2.0 * d * (p - 1.0)))
    alpha = (2.0 * lam * p**2 * a / (d * (p - 1.0))) * (lam / (d * (p - 1.0)) - 1.0)
    return {
        "p_c": params.p_c,
        "s": params.s,
        "mu": mu,
        "alpha": alpha,
        "tau": mu * (1.0 - lam / d),
        "threshold": 2.0 * p * lam * a / d,
    }


def save_solution_bundle(sol: OptimizerSolution, profile_path, json_path) -> None:
    """Profile CSV plus JSON sidecar with the solve summary."""
    save_profile_csv(sol.ell, profile_path)
    sidecar = {
        "d": sol.params.d,
        "lambda": sol.params.lam,
        "p": sol.params.p,
        "a": sol.a,
        "mu": sol.mu,
        "support_radius": sol.support_radius,
        "residual": sol.residual,
        "N": sol.grid.n,
        "R_max": sol.grid.R_max,
    }
    with open(json_path, "w", encoding="ascii") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")

"""Hessian of the interaction quotient at the optimizer, channel by channel.

At a converged optimizer ell the second variation is carried by the compact
operator

    A = 4 ell^(1-p/2) R ell^(1-p/2)          (indicator of supp ell at p = 2)

restricted to angular-momentum channels m, together with the rank-one term
alpha |ell^(p/2)><ell^(p/2)| in the radial channel and the spectral threshold
thr = 2 p lam a / d.  The exact relations this module verifies numerically:

    (A - thr) ell^((p-1)/2) phi = p lam a (lam/(d(p-1)) - 1) ell^(p/2)
                                   + 2 lam mu ell^(1-p/2)            (radial)
    (A - thr) ell^(p/2)         = thr (1/(p-1) - 1) ell^(p/2)
                                   + 4 mu ell^(1-p/2)                (radial)
    (A - thr) f                 = 4 tau ell^(1-p/2),
        f = (2/d)(1/(p-1) - 1) ell^((p-1)/2) phi
            - (lam/(d(p-1)) - 1) ell^(p/2)                           (radial)
    A (ell^(p/2-1) ell')        = thr ell^(p/2-1) ell'               (m = 1)
    <ell^(p/2), ell^((p-1)/2) phi> = (d/2)(1 - 1/p)

with phi = (d/2) sqrt(ell) + r (sqrt ell)' and tau = mu (1 - lam/d).  The
2x2 coefficient matrix of the first two identities has determinant
4 mu p lam a (lam/d - 1) < 0.

All matrices live in the weighted representation (vectors carry sqrt(w)), so
dense symmetric eigensolvers apply directly.  The derivative ell' uses
second-order differences one-sided into the support; the support-edge kink is
genuine and is handled by refinement, not smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .errors import ConvergenceError
from .optimizer import OptimizerSolution
from .radial_core import RadialProfile
from .riesz_kernel import channel_kernel

__all__ = [
    "HessianContext",
    "SpectrumReport",
    "build_hessian_context",
    "build_channel_A",
    "verify_identities",
    "channel_spectrum",
    "hessian_form",
    "hessian_matrix",
    "qhq_top_eigenvalue",
    "gap_estimate",
    "bs_triviality_check",
    "HessianFormResult",
]


def _radial_derivative(values: np.ndarray, r: np.ndarray, support: np.ndarray) -> np.ndarray:
    """d(values)/dr inside the support, zero outside.

    Second-order differences, one-sided at the support edge; the innermost
    node uses the even extension values(-r) = values(r)."""
    out = np.zeros_like(values)
    idx = np.nonzero(support)[0]
    if idx.size < 3:
        return out
    k = idx[-1]
    inner = np.gradient(values[: k + 1], r[: k + 1], edge_order=2)
    # even symmetry at the origin: values ~ v0 + c r^2
    inner[0] = 2.0 * r[0] * (values[1] - values[0]) / (r[1] ** 2 - r[0] ** 2)
    out[: k + 1] = inner
    return out


@dataclass(frozen=True)
class HessianContext:
    """Precomputed vectors and scalars for spectral work at one solution."""

    sol: OptimizerSolution
    alpha: float
    threshold: float
    tau: float
    weight: RadialProfile              # ell^(1-p/2), indicator at p = 2
    phi: RadialProfile                 # ell^((p-1)/2) phi
    v_p2: np.ndarray = field(repr=False)      # ell^(p/2)
    v_grad: np.ndarray = field(repr=False)    # ell^(p/2-1) ell'
    v_weight: np.ndarray = field(repr=False)  # ell^(1-p/2)
    v_phi: np.ndarray = field(repr=False)     # ell^((p-1)/2) phi
    dell: np.ndarray = field(repr=False)      # ell'
    support: np.ndarray = field(repr=False)
    inner_product_residual: float = 0.0

    @property
    def grid(self):
        return self.sol.grid

    @property
    def params(self):
        return self.sol.params

    def sqrt_w(self) -> np.ndarray:
        return np.sqrt(self.grid.weights)


def build_hessian_context(sol: OptimizerSolution) -> HessianContext:
    p = sol.params.p
    d = sol.params.d
    ell = sol.ell.values
    r = sol.grid.nodes
    w = sol.grid.weights
    support = ell > 0.0

    if p == 2.0:
        v_weight = support.astype(float)
        if not np.any(support):
            raise ValueError("p = 2 with empty support indicator")
    else:
        v_weight = np.where(support, ell ** (1.0 - 0.5 * p), 0.0)

    dell = _radial_derivative(ell, r, support)
    v_grad = np.zeros_like(ell)
    v_grad[support] = ell[support] ** (0.5 * p - 1.0) * dell[support]
    v_p2 = np.where(support, ell ** (0.5 * p), 0.0)
    # ell^((p-1)/2) phi = (d/2) ell^(p/2) + (r/2) ell^(p/2-1) ell'
    v_phi = 0.5 * d * v_p2 + 0.5 * r * v_grad

    lam = sol.params.lam
    alpha = (2.0 * lam * p**2 * sol.a / (d * (p - 1.0))) * (lam / (d * (p - 1.0)) - 1.0)
    inner = float(w @ (v_p2 * v_phi))
    inner_target = 0.5 * d * (1.0 - 1.0 / p)
    return HessianContext(
        sol=sol,
        alpha=alpha,
        threshold=sol.threshold,
        tau=sol.mu * (1.0 - lam / d),
        weight=sol.ell.with_values(v_weight),
        phi=sol.ell.with_values(v_phi),
        v_p2=v_p2,
        v_grad=v_grad,
        v_weight=v_weight,
        v_phi=v_phi,
        dell=dell,
        support=support,
        inner_product_residual=abs(inner - inner_target),
    )


def build_channel_A(ctx: HessianContext, m: int) -> np.ndarray:
    """Symmetric matrix of A on channel m in the weighted representation."""
    kern = channel_kernel(ctx.params, ctx.grid, m)
    D = ctx.v_weight
    return 4.0 * D[:, None] * kern.matrix * D[None, :]


def _tilde(ctx: HessianContext, values: np.ndarray) -> np.ndarray:
    return ctx.sqrt_w() * values


def _wnorm(ctx: HessianContext, values: np.ndarray) -> float:
    return float(np.linalg.norm(_tilde(ctx, values)))


def verify_identities(ctx: HessianContext) -> dict:
    """Residuals of the radial-channel operator identities.

    Keys: sw, sw2, sw3 (weighted-L2 residuals relative to thr * |vector|),
    m1_eigenpair (relative eigen-residual of the m = 1 threshold eigenvector),
    inner_product (absolute defect of (d/2)(1 - 1/p)), determinant_identity
    (closed-form 2x2 vs product formula, relative), determinant_value,
    determinant_measured (projection-measured 2x2 vs formula, relative).
    """
    p, d, lam = ctx.params.p, ctx.params.d, ctx.params.lam
    a, mu, thr, tau = ctx.sol.a, ctx.sol.mu, ctx.threshold, ctx.tau
    A0 = build_channel_A(ctx, 0)
    sw_ = ctx.sqrt_w()

    phi_t = sw_ * ctx.v_phi
    p2_t = sw_ * ctx.v_p2
    wt_t = sw_ * ctx.v_weight

    c11 = p * lam * a * (lam / (d * (p - 1.0)) - 1.0)
    c12 = 2.0 * lam * mu
    c21 = thr * (1.0 / (p - 1.0) - 1.0)
    c22 = 4.0 * mu

    res = {}
    lhs_sw = A0 @ phi_t - thr * phi_t
    res["sw"] = float(np.linalg.norm(lhs_sw - c11 * p2_t - c12 * wt_t)
                      / (thr * np.linalg.norm(phi_t)))
    lhs_sw2 = A0 @ p2_t - thr * p2_t
    res["sw2"] = float(np.linalg.norm(lhs_sw2 - c21 * p2_t - c22 * wt_t)
                       / (thr * np.linalg.norm(p2_t)))
    f_t = (2.0 / d) * (1.0 / (p - 1.0) - 1.0) * phi_t - (lam / (d * (p - 1.0)) - 1.0) * p2_t
    lhs_sw3 = A0 @ f_t - thr * f_t
    res["sw3"] = float(np.linalg.norm(lhs_sw3 - 4.0 * tau * wt_t)
                       / (thr * np.linalg.norm(f_t) + 1e-300))

    det_closed = c11 * c22 - c12 * c21
    det_formula = 4.0 * mu * p * lam * a * (lam / d - 1.0)
    res["determinant_value"] = det_formula
    res["determinant_identity"] = abs(det_closed - det_formula) / abs(det_formula)

    # measured coefficients: least-squares projection of the two LHS vectors
    # onto span{ell^(p/2), ell^(1-p/2)}
    B = np.stack([p2_t, wt_t], axis=1)
    coef1, *_ = np.linalg.lstsq(B, lhs_sw, rcond=None)
    coef2, *_ = np.linalg.lstsq(B, lhs_sw2, rcond=None)
    det_meas = coef1[0] * coef2[1] - coef1[1] * coef2[0]
    res["determinant_measured"] = abs(det_meas - det_formula) / abs(det_formula)

    res["inner_product"] = ctx.inner_product_residual

    A1 = build_channel_A(ctx, 1)
    g_t = sw_ * ctx.v_grad
    res["m1_eigenpair"] = float(np.linalg.norm(A1 @ g_t - thr * g_t)
                                / (thr * np.linalg.norm(g_t)))
    return res


@dataclass(frozen=True)
class SpectrumReport:
    m: int
    eigenvalues: tuple
    threshold: float
    gap: float
    identity_residuals: dict

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "threshold": self.threshold,
            "eigenvalues": list(self.eigenvalues),
            "gap": self.gap,
            "identity_residuals": dict(self.identity_residuals),
        }


def _constraints_for_channel(ctx: HessianContext, m: int) -> list:
    """Tilde-space constraint vectors of the non-degeneracy statement."""
    sw_ = ctx.sqrt_w()
    if m == 0:
        return [sw_ * ctx.v_weight, sw_ * ctx.v_phi]
    if m == 1:
        return [sw_ * ctx.v_grad]
    return []


def _constrained_top(matrix: np.ndarray, constraints: list) -> float:
    """Largest eigenvalue restricted to the orthogonal complement of the
    constraint vectors (deflation by a large negative shift)."""
    if not constraints:
        return float(eigh(matrix, eigvals_only=True,
                          subset_by_index=(matrix.shape[0] - 1, matrix.shape[0] - 1))[0])
    Q, _ = np.linalg.qr(np.stack(constraints, axis=1))
    M = matrix - Q @ (Q.T @ matrix)
    M = M - (M @ Q) @ Q.T
    scale = float(np.linalg.norm(matrix, 2))
    M = M - (10.0 * scale) * (Q @ Q.T)
    return float(eigh(M, eigvals_only=True,
                      subset_by_index=(M.shape[0] - 1, M.shape[0] - 1))[0])


def channel_spectrum(ctx: HessianContext, m: int, k: int = 8) -> SpectrumReport:
    """Top-k eigenvalues of channel-m A plus the case-specific gap.

    gap is threshold minus the top eigenvalue over the constrained subspace of
    the non-degeneracy statement (with the rank-one alpha term in channel 0);
    channel 0 additionally reports the bare threshold-avoidance margin."""
    if k < 1:
        raise ValueError("k must be >= 1")
    A = build_channel_A(ctx, m)
    evals = eigh(A, eigvals_only=True)
    top = tuple(float(v) for v in evals[::-1][:k])

    ident = {}
    Am = A
    if m == 0 and ctx.alpha != 0.0:
        v = _tilde(ctx, ctx.v_p2)
        Am = A + ctx.alpha * np.outer(v, v)
    gap = ctx.threshold - _constrained_top(Am, _constraints_for_channel(ctx, m))
    if m == 0:
        ident["threshold_avoidance"] = float(np.min(np.abs(evals - ctx.threshold)))
    if m == 1:
        sw_ = ctx.sqrt_w()
        g_t = sw_ * ctx.v_grad
        ident["eigenvalue_error"] = abs(top[0] - ctx.threshold) / ctx.threshold
        w_full, v_full = eigh(A)
        vec = v_full[:, -1]
        align = abs(vec @ g_t) / (np.linalg.norm(vec) * np.linalg.norm(g_t))
        ident["eigenvector_alignment"] = float(align)
    return SpectrumReport(m=m, eigenvalues=top, threshold=ctx.threshold,
                          gap=float(gap), identity_residuals=ident)


@dataclass(frozen=True)
class HessianFormResult:
    value: float
    projection_magnitude: float


def hessian_matrix(ctx: HessianContext, m: int) -> np.ndarray:
    """Channel-m Hessian H in the weighted representation (rank-one alpha
    term included in channel 0 only)."""
    kern = channel_kernel(ctx.params, ctx.grid, m)
    ell = ctx.sol.ell.values
    sq = np.sqrt(ell)
    H = 4.0 * sq[:, None] * kern.matrix * sq[None, :]
    pw = np.where(ctx.support, ell ** (ctx.params.p - 1.0), 0.0)
    H[np.diag_indices_from(H)] -= ctx.threshold * pw
    if m == 0 and ctx.alpha != 0.0:
        v = _tilde(ctx, np.where(ctx.support, ell ** (ctx.params.p - 0.5), 0.0))
        H += ctx.alpha * np.outer(v, v)
    return H


def hessian_form(ctx: HessianContext, g: RadialProfile | np.ndarray, m: int = 0) -> HessianFormResult:
    """Quadratic form <g, H g> on channel m.

    For m = 0 the argument is projected onto the complement of sqrt(ell)
    first (the Hessian is only defined there); the discarded component's
    weighted norm is reported."""
    vals = g.values if isinstance(g, RadialProfile) else np.asarray(g, dtype=float)
    g_t = _tilde(ctx, vals)
    proj = 0.0
    if m == 0:
        s_t = _tilde(ctx, np.sqrt(ctx.sol.ell.values))
        s_t = s_t / np.linalg.norm(s_t)
        c = float(s_t @ g_t)
        g_t = g_t - c * s_t
        proj = abs(c)
    H = hessian_matrix(ctx, m)
    return HessianFormResult(value=float(g_t @ (H @ g_t)), projection_magnitude=proj)


def qhq_top_eigenvalue(ctx: HessianContext, m_max: int = 2) -> float:
    """max over channels 0..m_max of the top eigenvalue of Q H Q,
    Q = 1 - |sqrt ell><sqrt ell| (Q acts only in channel 0)."""
    tops = []
    for m in range(m_max + 1):
        H = hessian_matrix(ctx, m)
        cons = [_tilde(ctx, np.sqrt(ctx.sol.ell.values))] if m == 0 else []
        tops.append(_constrained_top(H, cons))
    return float(max(tops))


def gap_estimate(ctx: HessianContext, m_max: int = 6) -> float:
    """kappa = min over channels of (threshold - constrained top eigenvalue).

    Channel constraints follow the non-degeneracy statement: channel 0
    excludes {ell^(1-p/2), ell^((p-1)/2) phi} and carries the rank-one alpha
    term; channel 1 excludes ell^(p/2-1) ell'; higher channels are bare."""
    if m_max < 2:
        raise ValueError("m_max must be >= 2")
    kappa = np.inf
    for m in range(m_max + 1):
        A = build_channel_A(ctx, m)
        if m == 0 and ctx.alpha != 0.0:
            v = _tilde(ctx, ctx.v_p2)
            A = A + ctx.alpha * np.outer(v, v)
        top = _constrained_top(A, _constraints_for_channel(ctx, m))
        kappa = min(kappa, ctx.threshold - top)
    if kappa <= 0.0:
        raise ConvergenceError(
            f"gap estimate is nonpositive ({kappa:.3e}): verification failure "
            f"at this resolution"
        )
    return float(kappa)


def bs_triviality_check(ctx: HessianContext) -> float:
    """min_i |(d/(2 p lam a)) theta_i - 1| over channel-0 eigenvalues: the
    margin by which 1 fails to be a Birman-Schwinger eigenvalue."""
    A = build_channel_A(ctx, 0)
    evals = eigh(A, eigvals_only=True)
    scaled = evals / ctx.threshold
    return float(np.min(np.abs(scaled - 1.0)))

"""Riesz interaction layer: channel kernels, potentials and pair energies.

The convolution R = |x|^(-lambda) * (.) acts on f(r) Y_m(omega) channel by
channel.  By the Funk-Hecke theorem the channel-m radial kernel is

    k_m(r, r') = |S^{d-2}| int_{-1}^{1} (r^2 + r'^2 - 2 r r' t)^(-lambda/2)
                                 Cb_m(t) (1 - t^2)^((d-3)/2) dt,

where Cb_m is the Gegenbauer polynomial C_m^{(d-2)/2} normalized to 1 at
t = 1 (Legendre for d = 3, Chebyshev T_m for d = 2; for d = 1 the two-point
even/odd combinations replace the integral).  Substituting t = 1 - u^2 turns
the integral into

    k_m = |S^{d-2}| B^(-nu/2) Phi_m(A/B),
    A = (r - r')^2 [+ t^2 shift],  B = 2 r r',
    Phi_m(a) = int_0^{sqrt 2} (a + u^2)^(-nu/2) g_m(u) du,
    g_m(u) = 2 u^(d-2) (2 - u^2)^((d-3)/2) Cb_m(1 - u^2),

a one-parameter family per (d, nu, m).  Phi_m is tabulated once on a log-a
grid and spline-interpolated; a >= ASYMPTOTIC_A uses the binomial far-field
series.  Assembly of an N x N kernel is then a vectorized spline lookup.

Near the diagonal the kernel is steep or (for lambda >= d-1) divergent, so
entries with |i - j| <= NEAR_BAND are replaced by cell averages of
k_m(r_i, .) over cell j against the volume measure, computed with panels
graded toward r' = r_i.  All panel geometry is relative to the cell width,
which makes kernel entries exactly equivariant under grid dilations.

Matrices are stored weight-symmetrized: Kt = W^(1/2) G W^(1/2) with
W = diag(quadrature weights) and G the apply matrix, so spectral work acts on
explicitly symmetric matrices.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import KernelQuadratureError
from .radial_core import Params, RadialGrid, RadialProfile, sphere_area

__all__ = [
    "ChannelKernel",
    "RieszConstants",
    "channel_kernel",
    "potential",
    "pair_energy",
    "riesz_constants",
    "apply_matrix",
    "save_kernel_cache",
    "load_kernel_cache",
    "clear_kernel_cache",
]

NEAR_BAND = 2          # |i-j| <= NEAR_BAND entries are cell-averaged
ASYMPTOTIC_A = 1.0e4   # switch to the far-field series beyond this a
A_FLOOR = 1.0e-22      # spline clamped below; see note in _PhiTable.eval
_PANEL_FLOOR = 1.0e-8  # graded panels stop at this fraction of the interval
_CHECK_TOL = 2.0e-5    # near-diagonal low/high-order agreement per entry
_BAND_ORDERS = (12, 16)  # GL orders for the band entries and their check


def _gauss_panels(breaks: np.ndarray, order: int):
    """Concatenated Gauss-Legendre nodes/weights on consecutive panels."""
    x, w = np.polynomial.legendre.leggauss(order)
    lo = breaks[:-1][:, None]
    hi = breaks[1:][:, None]
    nodes = (0.5 * (hi - lo) * x[None, :] + 0.5 * (hi + lo)).ravel()
    weights = (0.5 * (hi - lo) * w[None, :]).ravel()
    return nodes, weights


def _graded_breaks(lo: float, hi: float, toward_lo: bool, floor_frac: float = _PANEL_FLOOR):
    """Panel edges on [lo, hi], widths halving toward one endpoint."""
    span = hi - lo
    k = max(2, int(math.ceil(-math.log2(floor_frac))))
    fracs = 2.0 ** -np.arange(k + 1, dtype=float)
    fracs = np.concatenate([[0.0], fracs[::-1], [1.0]])
    fracs = np.unique(fracs)
    if toward_lo:
        return lo + span * fracs
    return hi - span * fracs[::-1]


def _zonal_values(d: int, m: int, t: np.ndarray) -> np.ndarray:
    """Cb_m(t): degree-m zonal polynomial normalized to Cb_m(1) = 1."""
    t = np.asarray(t, dtype=float)
    if d == 2:
        # Chebyshev T_m
        if m == 0:
            return np.ones_like(t)
        prev, cur = np.ones_like(t), t.copy()
        for _ in range(m - 1):
            prev, cur = cur, 2.0 * t * cur - prev
        return cur
    nu = 0.5 * (d - 2)
    if m == 0:
        return np.ones_like(t)
    prev, cur = np.ones_like(t), 2.0 * nu * t
    prev1, cur1 = 1.0, 2.0 * nu
    for k in range(2, m + 1):
        prev, cur = cur, (2.0 * t * (k + nu - 1.0) * cur - (k + 2.0 * nu - 2.0) * prev) / k
        prev1, cur1 = cur1, (2.0 * (k + nu - 1.0) * cur1 - (k + 2.0 * nu - 2.0) * prev1) / k
    return cur / cur1


class _PhiTable:
    """Spline table of Phi_m(a) for one (d, nu, m)."""

    def __init__(self, d: int, nu: float, m: int):
        if d < 2:
            raise ValueError("Phi tables exist only for d >= 2")
        self.d, self.nu, self.m = d, float(nu), m
        sqrt2 = math.sqrt(2.0)
        # u-quadrature: panels graded toward both endpoints (u = 0 resolves
        # the small-a boundary layer down to sqrt(A_FLOOR)/10; u = sqrt2
        # resolves the d = 2 Chebyshev endpoint weight and the d > 3 root cusp).
        mid = 0.5 * sqrt2
        breaks = np.concatenate([
            _graded_breaks(0.0, mid, toward_lo=True, floor_frac=1.0e-12),
            _graded_breaks(mid, sqrt2, toward_lo=False)[1:],
        ])
        u, wu = _gauss_panels(breaks, order=16)
        g = 2.0 * u ** (d - 2) * (2.0 - u**2) ** (0.5 * (d - 3)) * _zonal_values(d, m, 1.0 - u**2)
        self._u2 = u**2
        self._gw = g * wu
        xi = np.linspace(math.log(A_FLOOR), math.log(2.0 * ASYMPTOTIC_A), 6144)
        a = np.exp(xi)
        vals = ((a[:, None] + self._u2[None, :]) ** (-0.5 * self.nu)) @ self._gw
        self._spline = CubicSpline(xi, vals)
        self._spline_d = None
        # far-field series Phi(a) = a^(-nu/2) sum_k binom(-nu/2, k) G_{2k} a^-k
        ks = np.arange(6)
        self._asym_coeff = np.array([
            (-1.0) ** k * _pochhammer(0.5 * self.nu, k) / math.factorial(k)
            * float((u ** (2 * k) * g) @ wu)
            for k in ks
        ])

    def eval(self, a: np.ndarray) -> np.ndarray:
        # Values below A_FLOOR are clamped: they occur only at the graded-panel
        # floor inside cell averages, where their weight is negligible.
        a = np.asarray(a, dtype=float)
        out = np.empty_like(a)
        big = a >= ASYMPTOTIC_A
        small = ~big
        if np.any(small):
            out[small] = self._spline(np.log(np.maximum(a[small], A_FLOOR)))
        if np.any(big):
            ab = a[big]
            series = np.zeros_like(ab)
            for k in range(self._asym_coeff.size - 1, -1, -1):
                series = series / ab + self._asym_coeff[k]
            out[big] = ab ** (-0.5 * self.nu) * series
        return out

    def eval_deriv(self, a: np.ndarray) -> np.ndarray:
        """d Phi / d a (used by the extension layer's analytic kernel
        derivatives)."""
        a = np.asarray(a, dtype=float)
        if self._spline_d is None:
            self._spline_d = self._spline.derivative()
        out = np.empty_like(a)
        big = a >= ASYMPTOTIC_A
        small = ~big
        if np.any(small):
            ac = np.maximum(a[small], A_FLOOR)
            out[small] = self._spline_d(np.log(ac)) / ac
        if np.any(big):
            ab = a[big]
            series = np.zeros_like(ab)
            for k in range(self._asym_coeff.size - 1, -1, -1):
                series = series / ab + self._asym_coeff[k] * (-0.5 * self.nu - k)
            out[big] = ab ** (-0.5 * self.nu - 1.0) * series
        return out


def _pochhammer(x: float, k: int) -> float:
    out = 1.0
    for i in range(k):
        out *= x + i
    return out


_PHI_TABLES: dict = {}


def _phi_table(d: int, nu: float, m: int) -> _PhiTable:
    key = (d, repr(float(nu)), m)
    tab = _PHI_TABLES.get(key)
    if tab is None:
        tab = _PhiTable(d, nu, m)
        _PHI_TABLES[key] = tab
    return tab


def get_phi_table(d: int, nu: float, m: int = 0) -> _PhiTable:
    """Radial kernel profile table for exponent nu (extension layer hook)."""
    return _phi_table(d, nu, m)


def _kernel_pointwise(d, nu, m, r, rp, shift):
    """k_m(r, r') / |S^{d-1}| for arrays r, rp (broadcast), d >= 2."""
    tab = _phi_table(d, nu, m)
    B = 2.0 * r * rp
    A = (r - rp) ** 2 + shift
    pref = sphere_area(d - 1) / sphere_area(d) if d >= 2 else 1.0
    return pref * B ** (-0.5 * nu) * tab.eval(A / B)


def _kernel_pointwise_d1(nu, m, r, rp, shift):
    # the r = rp diagonal divides by zero when shift = 0; those entries are
    # always overwritten by the band cell averages
    with np.errstate(divide="ignore"):
        diff = ((r - rp) ** 2 + shift) ** (-0.5 * nu)
        summ = ((r + rp) ** 2 + shift) ** (-0.5 * nu)
    sign = 1.0 if m == 0 else -1.0
    return 0.5 * (diff + sign * summ)


def _point_kernel(d, nu, m, ri, rp, shift):
    if d == 1:
        return _kernel_pointwise_d1(nu, m, ri, rp, shift)
    return _kernel_pointwise(d, nu, m, ri, rp, shift)


_GL_CACHE: dict = {}


def _gl(order):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = np.polynomial.legendre.leggauss(order)
    return _GL_CACHE[order]


def _graded_fracs(floor_frac: float = _PANEL_FLOOR) -> np.ndarray:
    k = max(2, int(math.ceil(-math.log2(floor_frac))))
    fr = 2.0 ** -np.arange(k + 1, dtype=float)
    return np.unique(np.concatenate([[0.0], fr, [1.0]]))


def _batch_panels(breaks: np.ndarray, order: int):
    """GL nodes/weights per row for rows of ascending panel breaks."""
    x, w = _gl(order)
    lo = breaks[:, :-1, None]
    hi = breaks[:, 1:, None]
    nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    wts = 0.5 * (hi - lo) * w + np.zeros_like(nodes)
    n = breaks.shape[0]
    return nodes.reshape(n, -1), wts.reshape(n, -1)


def _batch_breaks(lo, hi, toward_lo: bool):
    fr = _graded_fracs()
    span = (hi - lo)[:, None]
    if toward_lo:
        return lo[:, None] + span * fr[None, :]
    return hi[:, None] - span * fr[::-1][None, :]


def _sliver_corrections(kfun, ri, eps):
    """Kernel integral over the skipped [0, eps] distance sliver at a singular
    node, from a two-point local power-law fit k ~ C Delta^eta (exact to
    leading order for lambda >= d-1 where the kernel diverges on the
    diagonal; negligible otherwise)."""
    k1 = kfun(ri, ri + eps)
    k2 = kfun(ri, ri + 2.0 * eps)
    ok = (k1 > 0.0) & (k2 > 0.0)
    eta = np.zeros_like(k1)
    np.divide(k2, k1, out=eta, where=ok)
    eta[ok] = np.clip(np.log(eta[ok]) / math.log(2.0), -0.999, 0.25)
    return np.where(ok, k1 * eps / (1.0 + eta), 0.0)


def _cell_average_rows(kfun, d, grid: RadialGrid, i_idx, j_idx, order, sliver: bool):
    """Average of kfun(r_i, .) over cell j against r'^(d-1) dr', batched.

    kfun broadcasts over its second argument.  Panels are graded toward
    r' = r_i; at diagonal entries the two slivers of relative width
    _PANEL_FLOOR around the node are closed with the local power-law model
    (sliver=True) or dropped (regular kernels)."""
    nodes, edges = grid.nodes, grid.edges
    vals = np.empty(i_idx.size)
    lo = edges[j_idx]
    hi = edges[j_idx + 1]
    ri = nodes[i_idx]
    vol = (hi**d - lo**d) / d if d > 1 else hi - lo
    meas_ri = ri ** (d - 1)

    inside = (lo < ri) & (ri < hi)
    if np.any(inside):
        li, hs, rs = lo[inside], hi[inside], ri[inside]
        eps_l = _PANEL_FLOOR * (rs - li)
        eps_r = _PANEL_FLOOR * (hs - rs)
        rp_l, wq_l = _batch_panels(_batch_breaks(li, rs - eps_l, toward_lo=False), order)
        rp_r, wq_r = _batch_panels(_batch_breaks(rs + eps_r, hs, toward_lo=True), order)
        rp = np.concatenate([rp_l, rp_r], axis=1)
        wq = np.concatenate([wq_l, wq_r], axis=1)
        kv = kfun(rs[:, None], rp)
        meas = rp ** (d - 1)
        corr = (_sliver_corrections(kfun, rs, eps_l)
                + _sliver_corrections(kfun, rs, eps_r)) if sliver else 0.0
        vals[inside] = (np.sum(kv * meas * wq, axis=1)
                        + corr * meas_ri[inside]) / vol[inside]

    outside = ~inside
    if np.any(outside):
        li, hs, rs = lo[outside], hi[outside], ri[outside]
        toward = rs <= li
        rp = np.empty((rs.size, (_graded_fracs().size - 1) * order))
        wq = np.empty_like(rp)
        for flag in (True, False):
            sel = toward == flag
            if np.any(sel):
                rp[sel], wq[sel] = _batch_panels(_batch_breaks(li[sel], hs[sel], toward_lo=flag), order)
        kv = kfun(rs[:, None], rp)
        meas = rp ** (d - 1)
        vals[outside] = np.sum(kv * meas * wq, axis=1) / vol[outside]
    return vals


def assemble_custom(kfun, grid: RadialGrid, *, sliver: bool = False,
                    check: bool = True) -> np.ndarray:
    """Apply matrix of a general radial kernel: point values off the band,
    cell averages on it.  kfun(r, r') must broadcast."""
    r = grid.nodes
    G = kfun(r[:, None], r[None, :])
    ii, jj = np.indices(G.shape)
    band = np.abs(ii - jj) <= NEAR_BAND
    bi, bj = ii[band], jj[band]
    hi_vals = _cell_average_rows(kfun, grid.d, grid, bi, bj, _BAND_ORDERS[1], sliver)
    if check:
        lo_vals = _cell_average_rows(kfun, grid.d, grid, bi, bj, _BAND_ORDERS[0], sliver)
        scale = np.max(np.abs(hi_vals)) + 1e-300
        viol = np.abs(hi_vals - lo_vals) / (np.abs(hi_vals) + 1e-9 * scale)
        if np.max(viol) > _CHECK_TOL:
            k = int(np.argmax(viol))
            raise KernelQuadratureError(
                f"near-diagonal quadrature not converged at (r, r') = "
                f"({r[bi[k]]:.6g}, {r[bj[k]]:.6g}): low/high order rules "
                f"disagree by {viol[k]:.2e} relative",
                r=float(r[bi[k]]), r_prime=float(r[bj[k]]),
            )
    G[band] = hi_vals
    return G


def _apply_matrix_raw(d, nu, grid: RadialGrid, m: int, shift: float) -> np.ndarray:
    """Unsymmetrized apply matrix G: (R_m f)(r_i) = sum_j G[i,j] w_j f_j."""
    if d == 1 and m > 1:
        raise ValueError("d = 1 has only the even (m=0) and odd (m=1) channels")

    def kfun(a, b):
        return _point_kernel(d, nu, m, a, b, shift)

    return assemble_custom(kfun, grid, sliver=(shift == 0.0), check=True)


@dataclass(frozen=True)
class ChannelKernel:
    """The channel-m restriction of R on a grid, weight-symmetrized.

    matrix is Kt = W^(1/2) G W^(1/2); the operator apply is
    (R_m f)_i = w_i^(-1/2) (Kt (w^(1/2) f))_i and the pair energy of channel-m
    radial parts is (w^(1/2) f) . Kt (w^(1/2) g).
    """

    m: int
    matrix: np.ndarray = field(repr=False)
    params: Params
    grid: RadialGrid

    def __post_init__(self):
        self.matrix.setflags(write=False)

    def apply(self, values: np.ndarray) -> np.ndarray:
        sw = np.sqrt(self.grid.weights)
        return (self.matrix @ (sw * values)) / sw

    def quad_form(self, f: np.ndarray, g: np.ndarray) -> float:
        sw = np.sqrt(self.grid.weights)
        return float((sw * f) @ (self.matrix @ (sw * g)))


@dataclass(frozen=True)
class RieszConstants:
    """R = c_d (-Delta)^(-s) with s = (d - lambda)/2."""

    s: float
    c_d: float


_KERNEL_CACHE: dict = {}


def clear_kernel_cache() -> None:
    _KERNEL_CACHE.clear()
    _PHI_TABLES.clear()


def apply_matrix(d: int, nu: float, grid: RadialGrid, m: int, shift: float = 0.0,
                 *, symmetrized: bool = True, cache: bool = True) -> np.ndarray:
    """Kernel matrix for exponent nu and diagonal shift (shift = t^2 > 0 is
    used by the Poisson-extension layer).  Returns Kt if symmetrized else G."""
    key = (grid.content_key(), repr(float(nu)), m, repr(float(shift)))
    Kt = _KERNEL_CACHE.get(key) if cache else None
    if Kt is None:
        G = _apply_matrix_raw(d, nu, grid, m, shift)
        sw = np.sqrt(grid.weights)
        Kt = sw[:, None] * G * sw[None, :]
        Kt = 0.5 * (Kt + Kt.T)
        Kt.setflags(write=False)
        if cache:
            _KERNEL_CACHE[key] = Kt
    if symmetrized:
        return Kt
    sw = np.sqrt(grid.weights)
    return Kt / sw[:, None] / sw[None, :]


def channel_kernel(params: Params, grid: RadialGrid, m: int) -> ChannelKernel:
    """Assemble (or fetch from cache) the channel-m kernel of |x|^(-lambda)."""
    if m < 0 or int(m) != m:
        raise ValueError(f"channel index m must be a nonnegative integer, got {m}")
    if grid.d != params.d:
        raise ValueError(f"grid dimension {grid.d} != params dimension {params.d}")
    Kt = apply_matrix(params.d, params.lam, grid, int(m))
    return ChannelKernel(m=int(m), matrix=Kt, params=params, grid=grid)


def potential(rho: RadialProfile, params: Params) -> RadialProfile:
    """(rho * |x|^(-lambda))(r), the m = 0 kernel applied to rho."""
    kern = channel_kernel(params, rho.grid, 0)
    return rho.with_values(kern.apply(rho.values))


def pair_energy(rho1: RadialProfile, rho2: RadialProfile, params: Params) -> float:
    """D(rho1, rho2), the interaction energy of two radial profiles."""
    if not rho1.grid.same_as(rho2.grid):
        raise ValueError("pair_energy requires both profiles on the same grid")
    kern = channel_kernel(params, rho1.grid, 0)
    return kern.quad_form(rho1.values, rho2.values)


def riesz_constants(params: Params) -> RieszConstants:
    s = params.s
    c_d = 4.0**s * math.pi ** (params.d / 2.0) * math.gamma(s) / math.gamma(params.d / 2.0 - s)
    return RieszConstants(s=s, c_d=c_d)


# -- optional binary disk cache ---------------------------------------------

_CACHE_MAGIC = b"rieszlab-kernel-v1"


def _disk_key(params: Params, grid: RadialGrid, m: int) -> str:
    h = hashlib.sha256()
    h.update(grid.content_key())
    h.update(f"|lam={params.lam!r}|m={m}".encode())
    return h.hexdigest()


def save_kernel_cache(kern: ChannelKernel, path) -> None:
    """Header with content key, then row-major 8-byte floats."""
    key = _disk_key(kern.params, kern.grid, kern.m)
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + b" " + key.encode() + b" " + str(kern.grid.n).encode() + b"\n")
        fh.write(np.ascontiguousarray(kern.matrix, dtype="<f8").tobytes())


def load_kernel_cache(path, params: Params, grid: RadialGrid, m: int) -> ChannelKernel | None:
    """Load a cached kernel if the key matches; None on any mismatch."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline().split()
            if header[0] != _CACHE_MAGIC or header[1].decode() != _disk_key(params, grid, m):
                return None
            n = int(header[2])
            data = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n)
    except (OSError, IndexError, ValueError):
        return None
    return ChannelKernel(m=m, matrix=data.copy(), params=params, grid=grid)

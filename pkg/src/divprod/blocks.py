"""One block of the divergent construction.

A block maps a unit vector u onto an orthogonal unit vector v by a finite
product of projections onto three subspaces: the plane W = u v v, a space X,
and a nearby space Y.  It is assembled in three steps:

1. a nested flag X_1 c ... c X_k along the quarter circle from u to v,
   with powers (X_j W X_j)^{r(j)} approximating the line projections;
2. a two-space reduction replacing each X_j by (X Y X)^{s(j)}, where Y is a
   small perturbation of X built from e_i + gamma_i w_i vectors;
3. the composite word psi with its robustness radius delta = eps/N, where
   N counts the W-slot letters.

Deep blocks are numerically degenerate: the flag parameters alpha_j shrink
geometrically in the number of digits and the two-space exponents s(j) grow
to millions of digits.  All construction therefore runs on exact 2x2 Gram
recursions in mpmath (the W-slot has rank 2, so every power of a word group
reduces to a 2x2 eigenproblem), with adaptive working precision.  Dense
float64 frames are materialized only on demand, at scales where they are
representable; tests cross-validate the two routes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import mpmath
import numpy as np
from mpmath import mp

from . import words as W
from ._mp import (
    ceil_mpf,
    eig2x2_psd,
    factored_opnorm,
    int_digits,
    ln_1p,
    log10_mpf,
    pow_one_minus,
    sqrt_psd,
    sym_opnorm,
    sym_pow_2x2_defect,
)
from .linalg import Frame, LinalgError, orthonormalize

__all__ = [
    "BlockError",
    "QuarterCircle",
    "NestedFlag",
    "TwoSpaceReduction",
    "BlockCertificate",
    "WindowLayout",
    "k_of_eps",
    "build_nested_flag",
    "build_two_space_reduction",
    "build_block",
    "verify_block_robustness",
]

SAFETY = mp.mpf("0.9")          # strict paper inequalities enforced at 0.9x
S_EXACT_DIGIT_CAP = 4096        # beyond this, certificates flag spectral-only
ALPHA_PROBE_CAP = 200


class BlockError(RuntimeError):
    pass


def k_of_eps(eps: float) -> int:
    """Smallest k >= 1 with (cos(pi/2k))^k > 1 - eps.

    Boundary cases (the power equal to 1 - eps in exact arithmetic) resolve
    on the side of the strict inequality failing.
    """
    if not 0 < eps < 1:
        raise BlockError("eps must lie in (0, 1)")
    with mp.workdps(40):
        target = 1 - mp.mpf(repr(eps))
        k = 1
        while True:
            val = mp.cos(mp.pi / (2 * k)) ** k
            if val > target + mp.mpf(10) ** (-25):
                return k
            k += 1
            if k > 10_000_000:  # pragma: no cover
                raise BlockError("k(eps) search exceeded cap")


@dataclass(frozen=True)
class WindowLayout:
    """Canonical coordinates of one block window of dimension 2k+4.

    index 0: u;  1..k: z_0..z_{k-1};  k+1..2k+2: w_1..w_{k+2};  2k+3: v.
    The X side of the window is everything except the w coordinates.
    """

    k: int

    @property
    def dim(self) -> int:
        return 2 * self.k + 4

    @property
    def u_index(self) -> int:
        return 0

    @property
    def v_index(self) -> int:
        return 2 * self.k + 3

    def z_index(self, j: int) -> int:
        return 1 + j

    def w_index(self, l: int) -> int:
        # l is 1-based over the k+2 flag basis vectors
        return self.k + l

    @property
    def x_indices(self) -> list[int]:
        return [0, *range(1, self.k + 1), self.v_index]

    @property
    def w_indices(self) -> list[int]:
        return list(range(self.k + 1, 2 * self.k + 3))


@dataclass(frozen=True)
class QuarterCircle:
    """Quarter-circle data: u, v, and k auxiliary directions z_0..z_{k-1}.

    ``canonical`` instances live in the window coordinates of
    :class:`WindowLayout` and never materialize vectors; explicit instances
    carry dense float vectors and are validated numerically.
    """

    k: int
    ambient_dim: int
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    z: np.ndarray | None = None    # (ambient_dim, k)

    def __post_init__(self):
        if self.k < 1:
            raise BlockError("k must be >= 1")
        if self.ambient_dim < self.k + 2:
            raise BlockError("ambient dimension too small for the quarter circle")
        if self.u is None:
            return
        u, v, z = (np.asarray(self.u, float), np.asarray(self.v, float),
                   np.asarray(self.z, float))
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "z", z)
        if abs(u @ v) > 1e-10:
            raise BlockError("u and v must be orthogonal")
        cols = np.column_stack([u, v, z])
        g = cols.T @ cols
        if not np.allclose(g, np.eye(cols.shape[1]), atol=1e-9):
            raise BlockError("quarter-circle system not orthonormal")

    @classmethod
    def canonical(cls, k: int, ambient_dim: int | None = None) -> "QuarterCircle":
        if ambient_dim is None:
            ambient_dim = k + 2
        return cls(k=k, ambient_dim=ambient_dim)

    @property
    def is_canonical(self) -> bool:
        return self.u is None

    @property
    def xi(self) -> float:
        return float(np.pi / (2 * self.k))

    def h(self, j: int) -> np.ndarray:
        """Point number j on the quarter circle, h_j = u cos(j xi) + v sin(j xi)."""
        if self.is_canonical:
            raise BlockError("canonical quarter circle has no dense vectors")
        return self.u * np.cos(j * self.xi) + self.v * np.sin(j * self.xi)

    def basis(self) -> np.ndarray:
        """Columns [u, z_0..z_{k-1}, v] spanning the flag's X space."""
        if self.is_canonical:
            dim = self.ambient_dim
            v_idx = 2 * self.k + 3 if dim >= 2 * self.k + 4 else self.k + 1
            cols = np.zeros((dim, self.k + 2))
            cols[0, 0] = 1.0
            for j in range(self.k):
                cols[1 + j, 1 + j] = 1.0
            cols[v_idx, self.k + 1] = 1.0
            return cols
        return np.column_stack([self.u, self.z, self.v])


# ---------------------------------------------------------------------------
# the 2x2 Gram engine
#
# For a subspace S containing candidates built from W-plane points and fresh
# z-directions, everything the construction needs is the 2x2 matrix
# M = U^T P_S U (U = [u v]).  We track its defect R = I - M.  Adding a
# generator h + alpha*z (z fresh, orthogonal to W and to S) updates
#     R <- R - (R hbar)(R hbar)^T / (alpha^2 + hbar^T R hbar),
# where hbar is the R^2 coordinate vector of h.

def _mpf(x):
    return x if isinstance(x, mp.mpf) else mp.mpf(repr(x) if isinstance(x, float) else x)


def _chebyshev_points(k, dps):
    """hbar_j = (cos j*xi, sin j*xi) as exact-precision mp pairs."""
    with mp.workdps(dps):
        xi = mp.pi / (2 * k)
        c, s = mp.cos(xi), mp.sin(xi)
        pts = [(mp.mpf(1), mp.mpf(0)), (c, s)]
        for _ in range(2, k + 1):
            a1, b1 = pts[-1]
            a2, b2 = pts[-2]
            pts.append((2 * c * a1 - a2, 2 * c * b1 - b2))
        return pts


def _r_update(R, hbar, alpha_sq):
    hx, hy = hbar
    qx = R[0, 0] * hx + R[0, 1] * hy
    qy = R[1, 0] * hx + R[1, 1] * hy
    t = hx * qx + hy * qy
    denom = alpha_sq + t
    Rn = mpmath.matrix(2, 2)
    Rn[0, 0] = R[0, 0] - qx * qx / denom
    Rn[0, 1] = R[0, 1] - qx * qy / denom
    Rn[1, 0] = Rn[0, 1]
    Rn[1, 1] = R[1, 1] - qy * qy / denom
    return Rn, (qx, qy), t, denom


def _stage_bound(R, hbar, r):
    """|| (X W X)^r - proj(h) || for the space with Gram defect R.

    (X W X)^r = V M^{r-1} V^T with V = P_X U, M = I - R; the difference from
    the rank-one projector onto h factors through S = [V, U hbar], giving a
    3x3 symmetric eigenproblem.
    """
    M = mpmath.matrix(2, 2)
    M[0, 0] = 1 - R[0, 0]
    M[0, 1] = -R[0, 1]
    M[1, 0] = M[0, 1]
    M[1, 1] = 1 - R[1, 1]
    Mp = sym_pow_2x2_defect(R, r - 1) if r > 1 else M
    hx, hy = hbar
    mh = (M[0, 0] * hx + M[0, 1] * hy, M[1, 0] * hx + M[1, 1] * hy)
    hh = hx * hx + hy * hy
    G = mpmath.matrix(3, 3)
    G[0, 0], G[0, 1], G[1, 1] = M[0, 0], M[0, 1], M[1, 1]
    G[1, 0] = G[0, 1]
    G[0, 2], G[1, 2] = mh[0], mh[1]
    G[2, 0], G[2, 1] = mh[0], mh[1]
    G[2, 2] = hh
    B = mpmath.matrix(3, 3)
    B[0, 0], B[0, 1], B[1, 1] = Mp[0, 0], Mp[0, 1], Mp[1, 1]
    B[1, 0] = B[0, 1]
    B[2, 2] = mp.mpf(-1)
    return factored_opnorm(G, B)


class _PrecisionExhausted(Exception):
    pass


def _flag_pass(k, eps, alpha0, dps):
    """Single fixed-precision attempt at the flag recursion."""
    with mp.workdps(dps):
        eps = _mpf(eps)
        alpha0 = _mpf(alpha0)
        hbar = _chebyshev_points(k, dps)
        stage_budget = SAFETY * eps / k
        rate_target = stage_budget / 2
        guard = mp.mpf(10) ** (-(6 * dps) // 10)

        R = mpmath.matrix(2, 2)
        R[0, 0], R[1, 1] = mp.mpf(1), mp.mpf(1)

        alphas = [alpha0]
        alpha_shifts: list[int] = []
        r_list: list[int] = []
        c_defects: list = []
        stage_bounds: list = []
        basis_coords: list = []  # (bu, bv) per accepted generator
        R_js: list = []          # defect state after each flag stage

        def accept(alpha_sq, hb):
            nonlocal R
            R, q, t, denom = _r_update(R, hb, alpha_sq)
            rd = mp.sqrt(denom)
            basis_coords.append((q[0] / rd, q[1] / rd))
            return t

        def bump(r):
            grow = ceil_mpf(mp.mpf(r) * (1 + mp.mpf(10) ** (-(dps // 2))))
            return max(r + 1, grow)

        # generator 0: h_0 + alpha_0 z_0
        accept(alpha0 * alpha0, hbar[0])

        for j in range(1, k + 1):
            hb = hbar[j]
            # unperturbed probe X'_j = X_{j-1} v h_j gives the rate c_j
            Rp, q, t, _ = _r_update(R, hb, mp.mpf(0))
            if t < guard * guard:
                raise _PrecisionExhausted(f"stage {j}: residual below resolution")
            delta_prime = Rp[0, 0] + Rp[1, 1]          # trace; R'_j has rank one
            if delta_prime <= 0 or delta_prime < guard * t:
                raise _PrecisionExhausted(f"stage {j}: rate defect unresolved")
            if delta_prime >= 1:
                r_j = 1
            else:
                r_j = max(1, ceil_mpf(mp.log(rate_target) / ln_1p(-delta_prime)))
                while pow_one_minus(delta_prime, r_j) >= rate_target:
                    r_j = bump(r_j)
            if j == k:
                alpha_j = mp.mpf(0)
                t_shift = 0
                bound = _stage_bound(Rp, hb, r_j)
                bumps = 0
                while bound >= stage_budget and bumps < 64:
                    r_j = bump(2 * r_j)
                    bound = _stage_bound(Rp, hb, r_j)
                    bumps += 1
                if bound >= stage_budget:
                    raise _PrecisionExhausted(f"stage {k}: final stage bound unresolved")
                accept(mp.mpf(0), hb)
            else:
                probes = 0

                def probe(t):
                    nonlocal probes
                    probes += 1
                    if probes > ALPHA_PROBE_CAP:
                        raise BlockError(
                            f"alpha search exceeded {ALPHA_PROBE_CAP} probes at "
                            f"stage {j} (numerically degenerate eps)")
                    aa = alphas[-1] / (mp.mpf(2) ** t)
                    if aa * aa < guard * guard:
                        raise _PrecisionExhausted(f"stage {j}: alpha below resolution")
                    Rc, _, _, _ = _r_update(R, hb, aa * aa)
                    return _stage_bound(Rc, hb, r_j), aa

                # the halving depth is nearly constant along the cascade, so
                # warm-start near the previous stage's depth and find the
                # smallest depth (largest alpha) satisfying the stage bound
                t_shift = max(1, (alpha_shifts[-1] - 2) if alpha_shifts else 1)
                bound, alpha_j = probe(t_shift)
                if bound < stage_budget:
                    while t_shift > 1:
                        b2, a2 = probe(t_shift - 1)
                        if b2 < stage_budget:
                            t_shift -= 1
                            bound, alpha_j = b2, a2
                        else:
                            break
                else:
                    while bound >= stage_budget:
                        t_shift += max(1, t_shift // 4)
                        bound, alpha_j = probe(t_shift)
                accept(alpha_j * alpha_j, hb)
            R_js.append(mpmath.matrix(R))
            if R[0, 0] + R[1, 1] < guard:
                raise _PrecisionExhausted(f"stage {j}: state scale below resolution")
            alphas.append(alpha_j)
            alpha_shifts.append(t_shift)
            r_list.append(r_j)
            c_defects.append(delta_prime)
            stage_bounds.append(bound)

        # completion of the X basis: residual of u against X_k
        if R[0, 0] < guard * guard:
            raise _PrecisionExhausted("basis completion unresolved")
        rw = mp.sqrt(R[0, 0])
        basis_coords.append((rw, R[1, 0] / rw))

        ub = [bc[0] for bc in basis_coords]
        vb = [bc[1] for bc in basis_coords]
        norm_dev = abs(mp.fsum(x * x for x in ub) - 1) + abs(mp.fsum(x * x for x in vb) - 1)
        norm_dev += abs(mp.fsum(x * y for x, y in zip(ub, vb)))
        if norm_dev > mp.mpf(10) ** (-dps // 3):
            raise _PrecisionExhausted("flag basis coordinates lost orthonormality")

        # action of the whole flag word on u, through the 2x2 shadows
        y = mpmath.matrix([mp.mpf(1), mp.mpf(0)])
        xsq = mp.mpf(1)
        for j in range(1, k + 1):
            Rj = R_js[j - 1]
            Mp = sym_pow_2x2_defect(Rj, r_list[j - 1] - 1)
            w2 = Mp * y
            Mj = mpmath.matrix(2, 2)
            Mj[0, 0] = 1 - Rj[0, 0]
            Mj[0, 1] = -Rj[0, 1]
            Mj[1, 0] = Mj[0, 1]
            Mj[1, 1] = 1 - Rj[1, 1]
            xsq = (w2.T * (Mj * w2))[0, 0]
            y = Mj * w2
        achieved_sq = xsq - 2 * y[1] + 1
        achieved = mp.sqrt(achieved_sq) if achieved_sq > 0 else mp.mpf(0)

        xi = mp.pi / (2 * k)
        quarter_defect = 1 - mp.cos(xi) ** k

        return {
            "alphas": alphas,
            "alpha_shifts": alpha_shifts,
            "r": r_list,
            "c_defects": c_defects,
            "stage_bounds": stage_bounds,
            "ub": ub,
            "vb": vb,
            "achieved": achieved,
            "quarter_defect": quarter_defect,
            "norm_dev": norm_dev,
            "dps": dps,
        }


def _run_adaptive(k, eps, alpha0, dps0=120, dps_cap=2_000_000):
    dps = dps0
    while True:
        try:
            return _flag_pass(k, eps, alpha0, dps)
        except _PrecisionExhausted:
            dps *= 2
            if dps > dps_cap:  # pragma: no cover
                raise BlockError("flag recursion exceeded precision cap")


@dataclass
class NestedFlag:
    """Nested flag X_1 c ... c X_k with its word phi = prod (b_j c b_j)^r(j)."""

    qc: QuarterCircle
    eps: float
    alpha0: float
    k: int
    r: list
    alphas: list            # mpf, alpha_0..alpha_k (alpha_k = 0)
    alpha_shifts: list      # ints; alpha_j = alpha_{j-1} / 2^shift
    c_defects: list         # mpf, 1 - c_j per stage
    stage_bounds: list      # mpf, verified (X_j W X_j)^{r(j)} vs proj(h_j)
    ub: list                # mpf, coords of u in the flag basis (k+2)
    vb: list
    achieved: object        # mpf, || phi(W, X_1..X_k) u - v ||
    quarter_defect: object
    norm_dev: object        # mpf, accumulated Gram error of the basis coords
    dps: int
    phi: W.PowerWord = field(default=None)

    def __post_init__(self):
        if self.phi is None:
            self.phi = flag_word(self.k, self.r)

    @property
    def N(self) -> int:
        return sum(self.r)

    def phi_length(self) -> int:
        return self.phi.length()

    def generator_vectors(self) -> np.ndarray:
        """Dense canonical-coordinate generators h_j + alpha_j z_j (k+1 columns).

        Only possible while every alpha_j is representable in float64.
        """
        alphas = [float(a) for a in self.alphas]
        if any(a != 0 and (a < 1e-300 or a < 1e-15) for a in alphas):
            raise BlockError("flag scales below float64; use the structural route")
        lay = WindowLayout(self.k)
        dim = self.qc.ambient_dim if not self.qc.is_canonical else lay.dim
        if self.qc.is_canonical:
            u = np.zeros(dim); u[lay.u_index] = 1.0
            v = np.zeros(dim); v[lay.v_index] = 1.0
            z = np.zeros((dim, self.k))
            for j in range(self.k):
                z[lay.z_index(j), j] = 1.0
        else:
            u, v, z = self.qc.u, self.qc.v, self.qc.z
        xi = np.pi / (2 * self.k)
        gens = []
        for j in range(self.k + 1):
            h = u * np.cos(j * xi) + v * np.sin(j * xi)
            if j < self.k:
                h = h + alphas[j] * z[:, j]
            gens.append(h)
        return np.column_stack(gens)

    def frame(self, j: int) -> Frame:
        """Dense frame of X_j (1 <= j <= k); requires representable scales."""
        if not 1 <= j <= self.k:
            raise BlockError("flag index out of range")
        gens = self.generator_vectors()
        return orthonormalize(list(gens[:, : j + 1].T), tol=1e-13)


def flag_word(k: int, r_list) -> W.PowerWord:
    """phi(c, b_1..b_k) = (b_k c b_k)^{r(k)} ... (b_1 c b_1)^{r(1)} in S_{k+1}."""
    m = k + 1
    factors = []
    for j in range(k, 0, -1):
        group = W.PowerWord(m, ((j + 1, 1), (1, 1), (j + 1, 1)))
        factors.append((group, r_list[j - 1]))
    return W.PowerWord(m, factors)


def build_nested_flag(qc: QuarterCircle, eps: float, alpha0: float = 0.5,
                      dps0: int = 120) -> NestedFlag:
    """Construct the nested flag for the given quarter circle.

    r(j) comes from the principal-angle rate of the unperturbed stage space
    against W; alpha_j is then shrunk (halving with doubling stride) until
    the verified stage bound ||(X_j W X_j)^{r(j)} - proj(h_j)|| < 0.9 eps/k
    holds.  The full word action ||phi(W,X_1..X_k)u - v|| is evaluated
    through the 2x2 Gram shadows and must come out below 1.8 eps.
    """
    if not 0 < eps < 1:
        raise BlockError("eps must lie in (0,1)")
    if not 0 < alpha0 < 1:
        raise BlockError("alpha0 must lie in (0,1)")
    if qc.ambient_dim < qc.k + 2:
        raise BlockError("ambient dimension must be at least k+2")
    data = _run_adaptive(qc.k, eps, alpha0, dps0)
    flag = NestedFlag(
        qc=qc, eps=eps, alpha0=alpha0, k=qc.k,
        r=data["r"], alphas=data["alphas"], alpha_shifts=data["alpha_shifts"],
        c_defects=data["c_defects"], stage_bounds=data["stage_bounds"],
        ub=data["ub"], vb=data["vb"], achieved=data["achieved"],
        quarter_defect=data["quarter_defect"], norm_dev=data["norm_dev"],
        dps=data["dps"],
    )
    with mp.workdps(data["dps"]):
        if not flag.achieved < 2 * SAFETY * _mpf(eps):
            raise BlockError(
                f"flag action error {mp.nstr(flag.achieved, 8)} exceeds 1.8*eps")
    return flag


# ---------------------------------------------------------------------------
# two-space reduction

@dataclass
class TwoSpaceReduction:
    k: int
    eps_prime: object        # mpf
    eta: object              # mpf
    a: int
    beta: list               # mpf, beta_1 < ... < beta_{k+1}
    beta_shifts: list        # ints; beta_j = beta_{j+1} / 2^shift
    s: list                  # ints, s(1) > ... > s(k) > a
    gamma: list              # mpf per flag-basis index (k+2 entries)
    bound_inside: list       # mpf, |1 - (1+beta_j^2)^{-s(j)}|
    bound_outside: list      # mpf, (1+beta_{j+1}^2)^{-s(j)}
    xy_distance: object      # mpf, exact ||X - Y|| = beta_{k+1}/sqrt(1+beta_{k+1}^2)
    spectral_only: bool
    dps: int

    def gamma_for_index(self, l: int):
        return self.gamma[l - 1]

    def y_frame(self, x_basis: np.ndarray, w_basis: np.ndarray) -> Frame:
        """Dense Y frame from explicit X-basis and w-system columns."""
        if any(float(g) == 0.0 for g in self.gamma):
            raise BlockError("gamma below float64 resolution; Y frame is structural")
        cols = []
        for idx, g in enumerate(self.gamma):
            g = float(g)
            y = (x_basis[:, idx] + g * w_basis[:, idx]) / np.sqrt(1 + g * g)
            cols.append(y)
        return Frame(x_basis.shape[0], np.column_stack(cols))


def _two_space_params(k: int, eps_prime, eta, a: int, dps: int) -> TwoSpaceReduction:
    with mp.workdps(dps):
        eps_prime = _mpf(eps_prime)
        eta = _mpf(eta)
        if not 0 < eta < 1:
            raise BlockError("eta must lie in (0,1)")
        target = SAFETY * eps_prime
        betas = [None] * (k + 2)     # betas[j] = beta_j, 1-based, up to k+1
        shifts = [None] * (k + 2)
        s_list = [None] * (k + 1)    # s_list[j] = s(j), 1-based
        betas[k + 1] = eta / 4
        log_t = mp.log(1 / target)
        floor_s = a
        for j in range(k, 0, -1):
            bj1 = betas[j + 1]
            s_j = max(floor_s + 1, ceil_mpf(log_t / ln_1p(bj1 * bj1)))
            while mp.exp(-mp.mpf(s_j) * ln_1p(bj1 * bj1)) >= target:
                s_j = max(s_j + 1,
                          ceil_mpf(mp.mpf(s_j) * (1 + mp.mpf(10) ** (-(dps // 2)))))
            s_list[j] = s_j
            floor_s = s_j
            # largest beta_j = beta_{j+1}/2^t with |(1+beta^2)^{-s} - 1| < target
            smpf = mp.mpf(s_j)
            t_est = int(max(1, ceil_mpf(mp.log(bj1 / mp.sqrt(target / (2 * smpf)), 2))))

            def inside_err(b):
                return -mp.expm1(-smpf * ln_1p(b * b))

            t = max(1, t_est)
            while inside_err(bj1 / mp.mpf(2) ** t) >= target:
                t += 1
                if t > t_est + 10_000:  # pragma: no cover
                    raise BlockError("beta search failed to converge")
            while t > 1 and inside_err(bj1 / mp.mpf(2) ** (t - 1)) < target:
                t -= 1
            betas[j] = bj1 / mp.mpf(2) ** t
            shifts[j] = t
        gamma = []
        for l in range(1, k + 3):
            if l <= 2:
                gamma.append(betas[1])
            elif l <= k + 1:
                gamma.append(betas[l - 1])
            else:
                gamma.append(betas[k + 1])
        bound_in, bound_out = [], []
        for j in range(1, k + 1):
            smpf = mp.mpf(s_list[j])
            bound_in.append(-mp.expm1(-smpf * ln_1p(betas[j] ** 2)))
            bound_out.append(mp.exp(-smpf * ln_1p(betas[j + 1] ** 2)))
            if not (bound_in[-1] < eps_prime and bound_out[-1] < eps_prime):
                raise BlockError(f"two-space bound failed at stage {j}")
        bkk = betas[k + 1]
        xy = bkk / mp.sqrt(1 + bkk * bkk)
        if not xy < eta:
            raise BlockError("||X - Y|| bound violated")
        spectral_only = any(int_digits(s) > S_EXACT_DIGIT_CAP for s in s_list[1:])
        return TwoSpaceReduction(
            k=k, eps_prime=eps_prime, eta=eta, a=a,
            beta=[betas[j] for j in range(1, k + 2)],
            beta_shifts=[shifts[j] for j in range(1, k + 1)],
            s=[s_list[j] for j in range(1, k + 1)],
            gamma=gamma, bound_inside=bound_in, bound_outside=bound_out,
            xy_distance=xy, spectral_only=spectral_only, dps=dps,
        )


def build_two_space_reduction(flag: NestedFlag, X: Frame | None, E_dim: int,
                              eps_prime: float, eta: float, a: int = 1) -> TwoSpaceReduction:
    """Numbers a < s(k) < ... < s(1) and betas realizing (XYX)^{s(j)} ~ X_j.

    X (when given, dense route) must contain the flag spaces; E_dim must
    leave room for the orthonormal w system, i.e. E_dim >= 2 rank(X).
    """
    rank_x = flag.k + 2 if X is None else X.rank
    if E_dim < 2 * rank_x:
        raise BlockError("E dimension insufficient for the w system")
    if a < 1:
        raise BlockError("a must be >= 1")
    # all selected quantities are exact dyadics or verified relative
    # comparisons, so a fixed moderate precision suffices at any scale
    return _two_space_params(flag.k, eps_prime, eta, a, dps=160)


# ---------------------------------------------------------------------------
# block certificates

def block_word(k: int, r_list, s_list) -> W.PowerWord:
    """psi in S_3: phi with each b_j replaced by (a2 a3 a2)^{s(j)}."""
    core = W.PowerWord(3, ((2, 1), (3, 1), (2, 1)))
    factors = []
    for j in range(k, 0, -1):
        Bj = W.power(core, s_list[j - 1])
        group = W.concat(W.concat(Bj, W.PowerWord(3, ((1, 1),))), Bj)
        factors.append((group, r_list[j - 1]))
    return W.PowerWord(3, factors)


def psi_by_substitution(phi: W.PowerWord, k: int, s_list) -> W.PowerWord:
    """Substitution route: relabel the slots clear of {a1,a2,a3}, substitute
    (a2 a3 a2)^{s(j)} for each slot, then restrict the alphabet to 3."""
    m = k + 4
    shifted = W.PowerWord(m, phi.factors)
    for j in range(k, 0, -1):
        shifted = W.transpose_letters(shifted, j + 1, j + 3)
    core = W.PowerWord(m, ((2, 1), (3, 1), (2, 1)))
    out = shifted
    for j in range(1, k + 1):
        out = W.substitute(out, j + 3, W.power(core, s_list[j - 1]))
    return W.restrict_alphabet(out, 3)


class _GroupOps:
    """Per-group data for evaluating psi through rank-2 Gram powers."""

    def __init__(self, ub, vb, gammas, s_list, r_list, dps):
        self.ub, self.vb = ub, vb
        self.s_list, self.r_list = s_list, r_list
        self.dps = dps
        self.n = len(ub)
        self.g_log = [ln_1p(g * g) for g in gammas]
        self.Suu = mp.fsum(x * x for x in ub)
        self.Suv = mp.fsum(x * y for x, y in zip(ub, vb))
        self.Svv = mp.fsum(y * y for y in vb)
        self.res_hi = mp.mpf(mp.dps) * mp.log(10) * mp.mpf("1.2")
        self.res_lo = mp.mpf(10) ** (-mp.dps)

    def taus(self, j):
        """(tau_l, 1 - tau_l^2) for group j (1-based)."""
        s = mp.mpf(self.s_list[j - 1])
        out = []
        for L in self.g_log:
            p = s * L
            if p > self.res_hi:
                out.append((mp.mpf(0), mp.mpf(1)))
            elif p < self.res_lo:
                out.append((mp.mpf(1), 2 * p))
            else:
                t = mp.exp(-p)
                out.append((t, -mp.expm1(-2 * p)))
        return out

    def group_defect(self, j):
        """R_eff = I - M for M = U_b^T diag(tau^2) U_b, assembled without
        cancellation."""
        taus = self.taus(j)
        r00 = mp.fsum(d * u * u for (_, d), u in zip(taus, self.ub))
        r01 = mp.fsum(d * u * v for (_, d), u, v in zip(taus, self.ub, self.vb))
        r11 = mp.fsum(d * v * v for (_, d), v in zip(taus, self.vb))
        Reff = mpmath.matrix(2, 2)
        Reff[0, 0] = (1 - self.Suu) + r00
        Reff[0, 1] = -self.Suv + r01
        Reff[1, 0] = Reff[0, 1]
        Reff[1, 1] = (1 - self.Svv) + r11
        return taus, Reff

    def apply_group(self, j, xb):
        """xb <- (B_j W B_j)^{r(j)} xb, all in flag-basis coordinates."""
        taus, Reff = self.group_defect(j)
        tx = [t * x for (t, _), x in zip(taus, xb)]
        c0 = mp.fsum(u * x for u, x in zip(self.ub, tx))
        c1 = mp.fsum(v * x for v, x in zip(self.vb, tx))
        Mp = sym_pow_2x2_defect(Reff, self.r_list[j - 1] - 1)
        d0 = Mp[0, 0] * c0 + Mp[0, 1] * c1
        d1 = Mp[1, 0] * c0 + Mp[1, 1] * c1
        return [t * (d0 * u + d1 * v)
                for (t, _), u, v in zip(taus, self.ub, self.vb)]


def _evaluate_block_action(ub, vb, gammas, s_list, r_list, dps,
                           collect=None):
    """|| psi(W, X, Y) u - v || via the structural engine.

    ``collect(j, xb)`` is invoked after each group when provided (used by the
    chain orbit runner for checkpoints).
    """
    with mp.workdps(dps):
        ops = _GroupOps(ub, vb, gammas, s_list, r_list, dps)
        xb = list(ub)
        k = len(r_list)
        for j in range(1, k + 1):
            xb = ops.apply_group(j, xb)
            if collect is not None:
                collect(j, xb)
        err = mp.sqrt(mp.fsum((x - v) ** 2 for x, v in zip(xb, vb)))
        return err, xb


@dataclass
class BlockCertificate:
    """Full construction record of one block, self-verifiable."""

    eps: float
    eta: object               # mpf, exact value used in the construction
    alpha0: float
    a: int
    k: int
    E_dim: int
    flag: NestedFlag
    reduction: TwoSpaceReduction
    psi: W.PowerWord
    N: int
    achieved_error: float
    eval_dps: int
    embedding: Frame | None = None

    @property
    def eta_log10(self) -> float:
        with mp.workdps(40):
            return float(log10_mpf(self.eta))

    @property
    def delta(self):
        """Robustness radius eps/N (mpf)."""
        with mp.workdps(max(40, self.eval_dps)):
            return _mpf(self.eps) / self.N

    @property
    def delta_log10(self) -> float:
        with mp.workdps(40):
            return float(log10_mpf(self.delta))

    @property
    def spectral_only(self) -> bool:
        return self.reduction.spectral_only

    def layout(self) -> WindowLayout:
        return WindowLayout(self.k)

    def reverify(self) -> float:
        """Re-evaluate ||psi(W,X,Y)u - v|| from the stored parameters."""
        err, _ = _evaluate_block_action(
            self.flag.ub, self.flag.vb, self.reduction.gamma,
            self.reduction.s, self.flag.r, self.eval_dps)
        return float(err)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        red = self.reduction
        doc = {
            "schema": "divprod/block-certificate/v1",
            "eps": _f17(self.eps),
            "eta": _mpf_enc(self.eta),
            "eta_log10": _f17(self.eta_log10),
            "alpha0": _f17(self.alpha0),
            "a": self.a,
            "k": self.k,
            "E_dim": self.E_dim,
            "flag": {
                "alpha_shifts": list(self.flag.alpha_shifts),
                "r": [_int_enc(r) for r in self.flag.r],
                "achieved": _mpf_enc(self.flag.achieved),
                "stage_bounds": [_mpf_enc(b) for b in self.flag.stage_bounds],
                "dps": self.flag.dps,
            },
            "two_space": {
                "beta_shifts": list(red.beta_shifts),
                "s": [_int_enc(s) for s in red.s],
                "eps_prime": _mpf_enc(red.eps_prime),
                "xy_distance": _mpf_enc(red.xy_distance),
                "dps": red.dps,
            },
            "N": _int_enc(self.N),
            "delta_log10": _f17(self.delta_log10),
            "achieved_error": _f17(self.achieved_error),
            "eval_dps": self.eval_dps,
            "spectral_only": self.spectral_only,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "BlockCertificate":
        doc = json.loads(text)
        if doc.get("schema") != "divprod/block-certificate/v1":
            raise BlockError("unknown certificate schema")
        cert = build_block(
            eps=float(doc["eps"]),
            eta=_mpf_dec(doc["eta"]),
            E=None,
            alpha0=float(doc["alpha0"]),
            a=int(doc["a"]),
        )
        # structural determinism: the rebuilt parameters must match the stored ones
        if [_int_enc(r) for r in cert.flag.r] != doc["flag"]["r"]:
            raise BlockError("certificate r-parameters do not reproduce")
        if [_int_enc(s) for s in cert.reduction.s] != doc["two_space"]["s"]:
            raise BlockError("certificate s-parameters do not reproduce")
        if abs(cert.achieved_error - float(doc["achieved_error"])) > 1e-8:
            raise BlockError(
                "stored achieved_error "
                f"{float(doc['achieved_error'])} not reproduced "
                f"(re-evaluated {cert.achieved_error})")
        return cert


def _f17(x) -> str:
    return format(float(x), ".17g")


def _int_enc(n: int) -> str:
    if int_digits(n) <= S_EXACT_DIGIT_CAP:
        return str(n)
    shift = (n & -n).bit_length() - 1
    return f"{n >> shift}p{shift}"


def _int_dec(s: str) -> int:
    if "p" in s:
        man, shift = s.split("p")
        return int(man) << int(shift)
    return int(s)


def _mpf_enc(x) -> str:
    sign, man, exp, _ = mp.mpf(x)._mpf_
    return f"{'-' if sign else ''}{man:#x}e{exp}"


def _mpf_dec(s: str):
    neg = s.startswith("-")
    if neg:
        s = s[1:]
    man, exp = s.split("e")
    v = mp.mpf(int(man, 16)) * mp.mpf(2) ** int(exp)
    return -v if neg else v


def build_flag_resolved(k: int, eps: float, alpha0: float = 0.5,
                        dps0: int = 120) -> NestedFlag:
    """Flag whose stored coordinates resolve scales far below delta = eps/N.

    The group evaluation engine treats the flag basis as exactly
    orthonormal, so the accumulated Gram error of the coordinates must sit
    well under the smallest group defect (~ eps/(k N)); rebuild at higher
    precision until it does.
    """
    qc = QuarterCircle.canonical(k, ambient_dim=WindowLayout(k).dim)
    flag = build_nested_flag(qc, eps, alpha0, dps0=dps0)
    for _ in range(8):
        with mp.workdps(max(60, flag.dps)):
            needed = _mpf(eps) / flag.N * mp.mpf(10) ** (-40)
            if flag.norm_dev < needed:
                return flag
            short = int(log10_mpf(flag.norm_dev / needed)) + 40
        flag = build_nested_flag(qc, eps, alpha0,
                                 dps0=flag.dps + max(short, flag.dps))
    raise BlockError("flag precision did not converge against delta")  # pragma: no cover


def build_block(u=None, v=None, eps: float = None, eta: float = None,
                E: Frame | None = None, alpha0: float = 0.5, a: int = 1,
                dps0: int = 120, _flag: NestedFlag | None = None) -> BlockCertificate:
    """Build one block certificate.

    With u = v = E = None the block is built in canonical window coordinates
    (dimension 2(k+2)); explicit u, v and an E frame fix an embedding
    instead.  The word psi, the exponents and the verified bounds depend
    only on (eps, eta, alpha0, a).
    """
    if eps is None or eta is None:
        raise BlockError("eps and eta are required")
    if not 0 < eps < 1:
        raise BlockError("eps must lie in (0,1)")
    k = k_of_eps(eps)
    embedding = None
    if u is not None or v is not None or E is not None:
        if u is None or v is None or E is None:
            raise BlockError("explicit mode needs u, v and E together")
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        if abs(u @ v) > 1e-8:
            raise BlockError("u and v must be (numerically) orthogonal")
        # re-orthonormalize below the rejection threshold
        pair = orthonormalize([u, v], tol=1e-12)
        if pair.rank != 2:
            raise BlockError("u and v do not span a plane")
        u, v = pair.columns[:, 0], pair.columns[:, 1]
        if E.rank < 2 * (k + 2):
            raise BlockError(f"E rank {E.rank} < required {2 * (k + 2)} for k={k}")
        P = E.columns @ E.columns.T
        if np.linalg.norm(P @ u - u) > 1e-9 or np.linalg.norm(P @ v - v) > 1e-9:
            raise BlockError("u and v must lie in span(E)")
        embedding = _window_embedding(u, v, E, k)
    if _flag is not None:
        flag = _flag
        if flag.k != k or flag.eps != eps:
            raise BlockError("prebuilt flag does not match eps")
    else:
        flag = build_flag_resolved(k, eps, alpha0, dps0=dps0)
    phi_len = flag.phi_length()
    with mp.workdps(60):
        eps_prime = _mpf(eps) / mp.mpf(phi_len)
    reduction = build_two_space_reduction(flag, None, WindowLayout(k).dim,
                                          eps_prime, eta, a=a)
    psi = block_word(k, flag.r, reduction.s)
    N = W.occurrences(psi, 1)
    if N != flag.N:
        raise BlockError("W-slot occurrence bookkeeping mismatch")
    eval_dps = max(flag.dps // 2, 160)
    err, _ = _evaluate_block_action(flag.ub, flag.vb, reduction.gamma,
                                    reduction.s, flag.r, eval_dps)
    with mp.workdps(60):
        if not err < 3 * SAFETY * _mpf(eps):
            raise BlockError(f"block action error {mp.nstr(err, 8)} exceeds 2.7 eps")
    return BlockCertificate(
        eps=eps, eta=reduction.eta, alpha0=alpha0, a=a, k=k,
        E_dim=WindowLayout(k).dim, flag=flag, reduction=reduction, psi=psi,
        N=N, achieved_error=float(err), eval_dps=eval_dps,
        embedding=embedding,
    )


def _window_embedding(u, v, E: Frame, k: int) -> Frame:
    """Orthonormal window basis [u, z_0..z_{k-1}, w_1..w_{k+2}, v] inside E."""
    lay = WindowLayout(k)
    dim = u.shape[0]
    cols = [u]
    # deterministic completion from E's columns
    pool = list(E.columns.T)
    aux = []
    for cand in pool:
        w = cand.copy()
        for q in [u, v] + aux:
            w = w - (q @ w) * q
        n = np.linalg.norm(w)
        if n > 1e-8:
            aux.append(w / n)
        if len(aux) >= 2 * k + 2:
            break
    if len(aux) < 2 * k + 2:
        raise BlockError("E does not contain enough independent directions")
    cols += aux[:k]                  # z
    cols += aux[k:2 * k + 2]         # w
    cols.append(v)
    T = np.column_stack(cols)
    return Frame(dim, T)


# ---------------------------------------------------------------------------
# robustness verification

def _gram(vectors):
    n = len(vectors)
    G = mpmath.matrix(n, n)
    for i in range(n):
        for j in range(i, n):
            G[i, j] = mp.fsum(a * b for a, b in zip(vectors[i], vectors[j]))
            G[j, i] = G[i, j]
    return G


def _slot_deviation(zc, cert) -> object:
    """|| W - Z P_E || for Z spanned by the (orthonormal) columns in zc.

    Columns are given in window coordinates (b-basis part, w part) plus an
    optional exterior part; P_E zeroes the exterior part.
    """
    ub, vb = cert.flag.ub, cert.flag.vb
    n = len(ub)
    zero = [mp.mpf(0)] * n
    ucol = {"b": list(ub), "w": list(zero)}
    vcol = {"b": list(vb), "w": list(zero)}
    ext_len = max((len(c.get("ext", [])) for c in zc), default=0)

    def pad(col):
        e = col.get("ext", [])
        return col["b"] + col["w"] + list(e) + [mp.mpf(0)] * (ext_len - len(e))

    def padw(col):
        return col["b"] + col["w"] + [mp.mpf(0)] * ext_len

    S1 = [pad(ucol), pad(vcol)] + [pad(c) for c in zc]
    S2 = [pad(ucol), pad(vcol)] + [padw(c) for c in zc]
    G1 = _gram(S1)
    G2 = _gram(S2)
    m = 2 + len(zc)
    B = mpmath.matrix(m, m)
    B[0, 0] = B[1, 1] = mp.mpf(1)
    for i in range(2, m):
        B[i, i] = mp.mpf(-1)
    C = B * G1 * B
    H = sqrt_psd(G2)
    val = sym_opnorm(H * C * H)
    return mp.sqrt(val) if val > 0 else mp.mpf(0)


def verify_block_robustness(cert: BlockCertificate, Z, Xp=None, Yp=None,
                            E=None) -> tuple[float, bool]:
    """Evaluate || psi(Z, X v X', Y v Y') u - v || and compare against 4 eps.

    Z is a pair of orthonormal columns given in window coordinates as dicts
    {"b": [...], "w": [...], "ext": [...]} (mpf entries); X', Y' are optional
    frames over the exterior coordinates only (they must be orthogonal to the
    window).  The measured ||W - Z P_E|| must fall below delta = eps/N.
    """
    dps = max(cert.eval_dps, 160)
    with mp.workdps(dps):
        dev = _slot_deviation(Z, cert)
        delta = cert.delta
        if not dev < delta:
            raise BlockError(
                f"robustness precondition violated: ||W - Z E|| = {mp.nstr(dev, 6)}"
                f" >= delta = {mp.nstr(delta, 6)}")
        ext_dim = max((len(c.get("ext", [])) for c in Z), default=0)
        Dj_cache = None
        if Xp is not None or Yp is not None:
            Dj_cache = _exterior_group_powers(Xp, Yp, cert, ext_dim)
        err = _evaluate_general_action(cert, Z, Dj_cache, ext_dim)
        bound = 4 * _mpf(cert.eps)
        return float(err), bool(err < bound)


def _exterior_group_powers(Xp, Yp, cert, ext_dim):
    """(X' Y' X')^{s(j)} for every group, over the exterior coordinates."""
    if ext_dim == 0:
        return None
    Px = mpmath.zeros(ext_dim, ext_dim)
    Py = mpmath.zeros(ext_dim, ext_dim)
    for F, P in ((Xp, Px), (Yp, Py)):
        if F is None:
            continue
        for col in F:
            for i in range(ext_dim):
                for j in range(ext_dim):
                    P[i, j] += col[i] * col[j]
    base = Px * Py * Px
    E, Q = mpmath.eigsy((base + base.T) / 2)
    out = {}
    for gj, s in enumerate(cert.reduction.s, start=1):
        D = mpmath.zeros(ext_dim, ext_dim)
        for i in range(ext_dim):
            lam = E[i]
            if lam <= 0:
                continue
            lam = min(lam, mp.mpf(1))
            p = mp.exp(mp.mpf(s) * mp.log(lam)) if lam < 1 else mp.mpf(1)
            for a in range(ext_dim):
                for b in range(ext_dim):
                    D[a, b] += p * Q[a, i] * Q[b, i]
        out[gj] = D
    return out


def _evaluate_general_action(cert, zc, Dj_cache, ext_dim):
    """psi action with a general rank-2 slot Z and optional exterior joins."""
    ub, vb = cert.flag.ub, cert.flag.vb
    gammas = cert.reduction.gamma
    s_list, r_list = cert.reduction.s, cert.flag.r
    ops = _GroupOps(ub, vb, gammas, s_list, r_list, mp.dps)
    n = len(ub)
    xb = list(ub)
    xe = [mp.mpf(0)] * ext_dim
    z_b = [c["b"] for c in zc]
    z_e = [list(c.get("ext", [])) + [mp.mpf(0)] * (ext_dim - len(c.get("ext", []))) for c in zc]
    k = len(r_list)
    for j in range(1, k + 1):
        taus = ops.taus(j)
        Dj = Dj_cache[j] if Dj_cache else None
        # B_j x
        bx = [t * x for (t, _), x in zip(taus, xb)]
        be = _matvec(Dj, xe) if Dj is not None else [mp.mpf(0)] * ext_dim
        # c = Z^T (B_j x)
        c = []
        for zi_b, zi_e in zip(z_b, z_e):
            val = mp.fsum(a * b for a, b in zip(zi_b, bx))
            if ext_dim:
                val += mp.fsum(a * b for a, b in zip(zi_e, be))
            c.append(val)
        # M = Z^T B_j^2 Z (2x2), powered r(j)-1 times
        bz_b = [[t * z for (t, _), z in zip(taus, zi)] for zi in z_b]
        bz_e = [_matvec(Dj, zi) if Dj is not None else [mp.mpf(0)] * ext_dim for zi in z_e]
        M = mpmath.matrix(2, 2)
        for a in range(2):
            for b in range(a, 2):
                val = mp.fsum(x * y for x, y in zip(bz_b[a], bz_b[b]))
                if ext_dim:
                    val += mp.fsum(x * y for x, y in zip(bz_e[a], bz_e[b]))
                M[a, b] = val
                M[b, a] = val
        Reff = mpmath.matrix(2, 2)
        Reff[0, 0] = 1 - M[0, 0]
        Reff[0, 1] = -M[0, 1]
        Reff[1, 0] = Reff[0, 1]
        Reff[1, 1] = 1 - M[1, 1]
        Mp = sym_pow_2x2_defect(Reff, r_list[j - 1] - 1)
        d = [Mp[0, 0] * c[0] + Mp[0, 1] * c[1], Mp[1, 0] * c[0] + Mp[1, 1] * c[1]]
        # x <- B_j (Z d)
        zx_b = [d[0] * a + d[1] * b for a, b in zip(z_b[0], z_b[1])]
        zx_e = [d[0] * a + d[1] * b for a, b in zip(z_e[0], z_e[1])]
        xb = [t * x for (t, _), x in zip(taus, zx_b)]
        xe = _matvec(Dj, zx_e) if Dj is not None else [mp.mpf(0)] * ext_dim
    return mp.sqrt(mp.fsum((x - v) ** 2 for x, v in zip(xb, vb)) +
                   mp.fsum(x * x for x in xe))


def _matvec(D, x):
    if D is None:
        return [mp.mpf(0)] * len(x)
    return [mp.fsum(D[i, j] * x[j] for j in range(len(x))) for i in range(D.rows)]

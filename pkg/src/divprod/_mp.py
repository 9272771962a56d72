"""Small arbitrary-precision helpers shared by the block and chain builders.

Everything here operates on mpmath values.  The builders keep their state in
2x2 / 3x3 / 4x4 Gram matrices, so the helpers only need tiny dense problems,
but the scalars they handle span thousands of orders of magnitude.
"""

from __future__ import annotations

import mpmath
from mpmath import mp


def ln_1p(x):
    """ln(1+x), accurate for x of any magnitude (including |x| << eps)."""
    if x == 0:
        return mp.mpf(0)
    ax = abs(x)
    if ax < mp.mpf(10) ** (-mp.dps // 2):
        # series: x - x^2/2 + x^3/3, remainder far below working precision
        return x * (1 - x / 2 + x * x / 3)
    return mp.log1p(x)


def pow_one_minus(lam, e):
    """(1 - lam)^e for lam in [0, 1], e a (possibly huge) nonnegative integer."""
    if e == 0:
        return mp.mpf(1)
    if lam <= 0:
        return mp.mpf(1)
    if lam >= 1:
        return mp.mpf(0)
    return mp.exp(mp.mpf(e) * ln_1p(-lam))


def one_minus_pow(lam, e):
    """1 - (1 - lam)^e without cancellation; lam in [0,1], e >= 0 integer."""
    if e == 0 or lam <= 0:
        return mp.mpf(0)
    if lam >= 1:
        return mp.mpf(1)
    t = mp.mpf(e) * ln_1p(-lam)
    return -mp.expm1(t)


def eig2x2_psd(R):
    """Eigen-decomposition of a symmetric (nearly) PSD 2x2 mpmath matrix.

    Returns (lam1, lam2, q1, q2) with lam1 >= lam2 and orthonormal
    eigenvectors as 2-tuples.  lam2 is recovered from the determinant to
    avoid the trace/discriminant cancellation when the eigenvalues are far
    apart in scale.
    """
    a, b, c = R[0, 0], R[0, 1], R[1, 1]
    tr = a + c
    det = a * c - b * b
    disc = mp.sqrt((a - c) ** 2 + 4 * b * b)
    lam1 = (tr + disc) / 2
    if lam1 > 0:
        lam2 = det / lam1
    else:
        lam1 = mp.mpf(0)
        lam2 = mp.mpf(0)
    if lam2 < 0 and abs(lam2) < mp.mpf(10) ** (-(mp.dps * 3) // 5):
        lam2 = mp.mpf(0)
    # eigenvector for lam1: pick the better-conditioned formula
    v1 = (b, lam1 - a)
    v2 = (lam1 - c, b)
    n1 = v1[0] ** 2 + v1[1] ** 2
    n2 = v2[0] ** 2 + v2[1] ** 2
    vx, vy = (v1 if n1 >= n2 else v2)
    n = mp.sqrt(vx * vx + vy * vy)
    if n == 0:  # R is (numerically) a multiple of the identity
        q1 = (mp.mpf(1), mp.mpf(0))
    else:
        q1 = (vx / n, vy / n)
    q2 = (-q1[1], q1[0])
    return lam1, lam2, q1, q2


def mat2(a, b, c, d):
    return mpmath.matrix([[a, b], [c, d]])


def sym_pow_2x2_defect(R, e):
    """(I - R)^e for a symmetric 2x2 defect matrix R with tiny eigenvalues.

    Powers are taken in log space so e may be an arbitrary big integer.
    Returns an mpmath 2x2 matrix.
    """
    lam1, lam2, q1, q2 = eig2x2_psd(R)
    m1 = pow_one_minus(lam1, e)
    m2 = pow_one_minus(lam2, e)
    out = mpmath.zeros(2, 2)
    for m, q in ((m1, q1), (m2, q2)):
        out[0, 0] += m * q[0] * q[0]
        out[0, 1] += m * q[0] * q[1]
        out[1, 1] += m * q[1] * q[1]
    out[1, 0] = out[0, 1]
    return out


def sqrt_psd(G):
    """Symmetric square root of a small PSD mpmath matrix (eigen based)."""
    E, Q = mpmath.eigsy(G)
    n = G.rows
    S = mpmath.zeros(n, n)
    for i in range(n):
        ev = E[i]
        if ev < 0:
            ev = mp.mpf(0)
        S[i, i] = mp.sqrt(ev)
    return Q * S * Q.T


def sym_opnorm(A):
    """Operator norm (largest |eigenvalue|) of a small symmetric matrix."""
    E, _ = mpmath.eigsy(A)
    return max(abs(E[i]) for i in range(A.rows))


def factored_opnorm(G, B):
    """||S B S^T|| for S with Gram matrix G = S^T S (B symmetric, small)."""
    H = sqrt_psd(G)
    return sym_opnorm(H * B * H)


def ceil_mpf(x) -> int:
    """Exact ceiling of an mpf as a Python int (arbitrary size)."""
    n = int(mpmath.floor(x))
    if mp.mpf(n) == x:
        return n
    return n + 1


def log10_mpf(x):
    if x <= 0:
        return mp.mpf("-inf")
    return mp.log(x) / mp.log(10)


def pow2_encode(n: int) -> tuple[int, int]:
    """Split a positive int as (odd_mantissa, shift) with n = mantissa << shift."""
    if n <= 0:
        raise ValueError("positive integer required")
    shift = (n & -n).bit_length() - 1
    return n >> shift, shift


def int_digits(n: int) -> int:
    """Number of decimal digits of a nonnegative int, without str()."""
    if n == 0:
        return 1
    # bit_length * log10(2), corrected by at most 1
    d = int(n.bit_length() * 0.30102999566398114) + 1
    lo = 10 ** (d - 1)
    if n < lo:
        d -= 1
    return d

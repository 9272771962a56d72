"""Making every nonzero point misbehave, at finite truncation.

Three constructions:

* a fan-out: pairwise-orthogonal copies of the divergent chain, one per
  basis vector of a subspace X, joined letter-wise, so any point of X with
  a nonzero seed component inherits the divergence signature of that seed's
  chain (Pythagorean split across the copies);
* a pairing space Y between X and designated partner vectors f_lambda, so
  that Xz = 0 forces XYz = (1/2) sum <f_lambda, z> w^lambda != 0 whenever z
  has a partner component;
* the five-tuple (X, Y, X_1, X_2, X_3) dispatching u_0 = Xz, v_0 = XYz into
  the shared schedule.

Truncation note: a finite truncation cannot pair all of X-perp while also
hosting the per-seed chain windows inside it (the construction needs
dim(X-perp) = dim(X) for a complete pairing but dim(X-perp) >> dim(X) for
the windows; only infinite dimensions reconcile the two).  The five-tuple
therefore pairs each seed with one designated unit vector inside its chain
window (the second step vector e_2^lambda).  Every z with a nonzero
component on a seed or a partner is covered; the dispatcher reports the
uncovered window-interior corner as a hard failure, and random unit vectors
are covered with probability one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chains import ChainError, GluedTriple, build_chain, run_orbit, verify_divergence
from .linalg import Frame, LinalgError, orthonormalize
from .trace import Checkpoint, OrbitTrace

__all__ = [
    "EverywhereError",
    "FanOut",
    "FiveTuple",
    "build_pairing",
    "pairing_system",
    "build_fanout",
    "build_five",
    "dispatch_and_run",
]


class EverywhereError(RuntimeError):
    pass


def pairing_system(X: Frame, ambient: int):
    """Matched bases (e_lambda of X, f_lambda of X-perp) and the pairing Y.

    Requires rank(X) = ambient - rank(X).  Returns (Y, E, F) with Y spanned
    by (e_lambda + f_lambda)/sqrt(2).
    """
    if X.ambient_dim != ambient:
        raise EverywhereError("frame ambient dimension mismatch")
    if X.rank == 0 or X.rank != ambient - X.rank:
        raise EverywhereError(
            f"pairing requires rank(X) = ambient - rank(X); got {X.rank} vs "
            f"{ambient - X.rank}")
    P = X.columns @ X.columns.T
    vals, vecs = np.linalg.eigh(np.eye(ambient) - P)
    comp = vecs[:, vals > 0.5]
    F = orthonormalize(list(comp.T), tol=1e-12)
    if F.rank != X.rank:
        raise EverywhereError("complement rank mismatch")
    cols = (X.columns + F.columns) / np.sqrt(2.0)
    return Frame(ambient, cols), X, F


def build_pairing(X: Frame, ambient: int) -> Frame:
    """Subspace Y with Xz != 0 or XYz != 0 for every nonzero z."""
    Y, _, _ = pairing_system(X, ambient)
    return Y


def pairing_floor() -> float:
    """Worst-case max(||Xz||, ||XYz||) over unit z for a complete pairing.

    Minimized by z with the X-perp component antiparallel (under the
    pairing) to the X component; balancing t = (sqrt(1-t^2) - t)/2 gives
    t = 1/sqrt(10).
    """
    return 1.0 / float(np.sqrt(10.0))


@dataclass
class FanOut:
    d: int
    chain: GluedTriple
    ambient_dim: int
    offsets: tuple                    # per-seed global window start
    canonical_trace: OrbitTrace
    canonical_verdict: dict

    def seed_coord(self, lam: int) -> int:
        """Global coordinate of seed w^lambda (lambda 1-based)."""
        return self.offsets[lam - 1] + self.chain.geometry.e_coord(1)

    def partner_coord(self, lam: int) -> int:
        """Global coordinate of the designated pairing partner f_lambda."""
        return self.offsets[lam - 1] + self.chain.geometry.e_coord(2)

    def seed_frame(self) -> Frame:
        return Frame.from_coords(self.ambient_dim,
                                 [self.seed_coord(l) for l in range(1, self.d + 1)])

    def joined_frames(self):
        """Dense joined frames (X_1, X_2, X_3) = per-copy joins of the chain
        spaces (X, Y, Z).  Requires float64-representable chain scales."""
        from .chains import densify_triple
        X, Y, Z = densify_triple(self.chain)
        Dc = self.chain.geometry.D
        out = []
        for F in (X, Y, Z):
            cols = np.zeros((self.ambient_dim, F.rank * self.d))
            for lam in range(self.d):
                off = self.offsets[lam]
                cols[off: off + Dc, lam * F.rank:(lam + 1) * F.rank] = F.columns
            out.append(Frame(self.ambient_dim, cols))
        return tuple(out)


def build_fanout(d: int, m: int = 1, eps_schedule=None, eps_base: float = 9.0) -> FanOut:
    """d pairwise-orthogonal copies of one chain, sharing the schedule word."""
    if d < 1:
        raise EverywhereError("d must be >= 1")
    chain = build_chain(m, eps_schedule=eps_schedule, eps_base=eps_base)
    Dc = chain.geometry.D
    offsets = tuple(lam * Dc for lam in range(d))
    trace = run_orbit(chain)
    verdict = verify_divergence(trace, chain)
    if not verdict["holds"]:
        raise EverywhereError("canonical chain failed its divergence checks")
    return FanOut(d=d, chain=chain, ambient_dim=d * Dc, offsets=offsets,
                  canonical_trace=trace, canonical_verdict=verdict)


@dataclass
class FiveTuple:
    """Frames X, Y, X_1, X_2, X_3 with the dispatch rule u0 = Xz, v0 = XYz."""

    fanout: FanOut

    @property
    def ambient_dim(self) -> int:
        return self.fanout.ambient_dim

    @property
    def d(self) -> int:
        return self.fanout.d

    def x_frame(self) -> Frame:
        return self.fanout.seed_frame()

    def y_frame(self) -> Frame:
        cols = []
        D = self.ambient_dim
        for lam in range(1, self.d + 1):
            c = np.zeros(D)
            c[self.fanout.seed_coord(lam)] = 1.0 / np.sqrt(2.0)
            c[self.fanout.partner_coord(lam)] = 1.0 / np.sqrt(2.0)
            cols.append(c)
        return Frame(D, np.column_stack(cols))

    def dispatch(self, z):
        """Coefficients of u0 = Xz and v0 = XYz on the seed basis."""
        z = np.asarray(z, float)
        if z.shape != (self.ambient_dim,):
            raise EverywhereError("vector dimension mismatch")
        cu = np.array([z[self.fanout.seed_coord(l)] for l in range(1, self.d + 1)])
        cv = np.array([0.5 * (z[self.fanout.seed_coord(l)] +
                              z[self.fanout.partner_coord(l)])
                       for l in range(1, self.d + 1)])
        return cu, cv


def build_five(d: int = 2, m: int = 1, eps_schedule=None,
               eps_base: float = 9.0) -> FiveTuple:
    return FiveTuple(fanout=build_fanout(d, m, eps_schedule, eps_base))


def _scaled_trace(canonical: OrbitTrace, coeffs: np.ndarray, dominant: int) -> OrbitTrace:
    """Trace of the joined orbit of sum_l c_l w^lambda.

    All copies run the same words, so checkpoint norms and gaps scale by
    ||c||_2 while the probe columns scale by the dominant coefficient.
    """
    scale = float(np.linalg.norm(coeffs))
    cdom = float(coeffs[dominant])
    out = OrbitTrace(meta={"scale": scale, "dominant_seed": dominant + 1,
                           "coefficients": [float(c) for c in coeffs]})
    for c in canonical.checkpoints:
        out.append(Checkpoint(
            position=c.position, block=c.block,
            norm=scale * c.norm,
            dist_to_target=scale * c.dist_to_target,
            weak_probes=tuple(cdom * p for p in c.weak_probes),
            err_budget=scale * c.err_budget))
    return out


def dispatch_and_run(five: FiveTuple, z) -> tuple[OrbitTrace, OrbitTrace, dict]:
    """Run the shared schedule on u0 = Xz and v0 = XYz.

    The verdict is positive when at least one of the two traces carries the
    non-Cauchy, norm-bounded-below signature, scaled by the magnitude of
    its largest seed component.
    """
    z = np.asarray(z, float)
    if np.linalg.norm(z) == 0:
        raise EverywhereError("z must be nonzero")
    cu, cv = five.dispatch(z)
    if np.linalg.norm(cu) == 0 and np.linalg.norm(cv) == 0:
        raise EverywhereError(
            "both dispatch images vanish: z lies in the unpaired window "
            "interior of the truncation (pairing invariant violated)")
    chain = five.fanout.chain
    eps = chain.eps_schedule
    bound = 4 * sum(eps)
    canonical = five.fanout.canonical_trace
    verdict = {"checks": [], "holds": False}
    traces = []
    for name, coeffs in (("u", cu), ("v", cv)):
        nc = float(np.linalg.norm(coeffs))
        if nc == 0:
            traces.append(OrbitTrace(meta={"empty": True, "branch": name}))
            continue
        dom = int(np.argmax(np.abs(coeffs)))
        tr = _scaled_trace(canonical, coeffs, dom)
        traces.append(tr)
        t_dom = abs(float(coeffs[dom]))
        floor = t_dom * (1 - bound)
        gap = t_dom * (float(np.sqrt(2)) - 2 * bound)
        ok = floor > 0 and gap > 0 and five.fanout.canonical_verdict["holds"]
        verdict["checks"].append({
            "branch": name, "dominant_seed": dom + 1,
            "component": t_dom, "norm_floor": floor, "gap_floor": gap,
            "holds": bool(ok),
        })
        if ok:
            verdict["holds"] = True
    verdict["bound_4_sum_eps"] = bound
    return traces[0], traces[1], verdict

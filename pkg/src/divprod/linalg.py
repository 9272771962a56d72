"""Finite-dimensional real inner-product-space primitives.

Frames are orthonormal spanning sets stored column-wise; subspaces are
identified with their orthogonal projectors P = F F^T.  Also hosts the two
classical convergent baselines (alternating products of two projections and
periodic products) used for contrast against the divergent constructions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .trace import Checkpoint, OrbitTrace

__all__ = [
    "Frame",
    "Projector",
    "PrincipalAngleData",
    "LinalgError",
    "orthonormalize",
    "projector",
    "operator_norm",
    "projector_distance",
    "principal_angles",
    "matrix_power",
    "alternating_limit",
    "periodic_product_run",
    "intersection_frame",
]

ORTHO_TOL = 1e-10
PROJ_TOL = 1e-9
CONTRACTION_TOL = 1e-9


class LinalgError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    """Orthonormal spanning set of a subspace of R^D.

    Parameters
    ----------
    ambient_dim : int
        Dimension D of the ambient space.
    columns : ndarray of shape (D, r)
        Orthonormal columns; r may be 0 for the zero subspace.
    """

    ambient_dim: int
    columns: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2 or cols.shape[0] != self.ambient_dim:
            raise LinalgError("columns must be a (D, r) array")
        object.__setattr__(self, "columns", cols)
        if cols.shape[1] > self.ambient_dim:
            raise LinalgError("rank exceeds ambient dimension")
        if cols.shape[1]:
            g = cols.T @ cols
            if not np.allclose(g, np.eye(cols.shape[1]), atol=ORTHO_TOL * 10):
                dev = np.max(np.abs(g - np.eye(cols.shape[1])))
                raise LinalgError(f"frame columns not orthonormal (dev {dev:.3e})")

    @property
    def rank(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def from_coords(cls, ambient_dim, coord_indices):
        cols = np.zeros((ambient_dim, len(coord_indices)))
        for j, i in enumerate(coord_indices):
            cols[i, j] = 1.0
        return cls(ambient_dim, cols)

    @classmethod
    def zero(cls, ambient_dim):
        return cls(ambient_dim, np.zeros((ambient_dim, 0)))

    def to_json(self) -> str:
        doc = {
            "ambient_dim": self.ambient_dim,
            "columns": [[format(x, ".17g") for x in col] for col in self.columns.T],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Frame":
        doc = json.loads(text)
        cols = np.array([[float(x) for x in col] for col in doc["columns"]]).T
        if cols.size == 0:
            cols = np.zeros((doc["ambient_dim"], 0))
        return cls(doc["ambient_dim"], cols)


@dataclass(frozen=True)
class Projector:
    matrix: np.ndarray
    source_frame: Frame | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise LinalgError("projector matrix must be square")
        if np.max(np.abs(m - m.T), initial=0.0) > PROJ_TOL:
            raise LinalgError("projector not symmetric")
        if operator_norm(m @ m - m) > PROJ_TOL:
            raise LinalgError("projector not idempotent")
        if self.source_frame is not None:
            ref = self.source_frame.columns @ self.source_frame.columns.T
            if operator_norm(m - ref) > PROJ_TOL:
                raise LinalgError("projector does not match its source frame")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PrincipalAngleData:
    cosines: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cosines, dtype=float)
        object.__setattr__(self, "cosines", c)
        if c.size and (np.any(c < -1e-12) or np.any(c > 1 + 1e-12)):
            raise LinalgError("cosines must lie in [0, 1]")

    def angles(self):
        return np.arccos(np.clip(self.cosines, 0.0, 1.0))


def orthonormalize(vectors, tol: float = ORTHO_TOL) -> Frame:
    """Gram-Schmidt with rank reduction.

    Parameters
    ----------
    vectors : sequence of 1-d arrays
        Spanning vectors, possibly dependent.
    tol : float
        Vectors whose residual norm (after normalization and projection onto
        the previously accepted columns) falls below tol are dropped.

    Returns
    -------
    Frame spanning the same subspace.
    """
    vecs = [np.asarray(v, dtype=float) for v in vectors]
    if not vecs:
        raise LinalgError("cannot infer ambient dimension from empty input")
    dim = vecs[0].shape[0]
    accepted: list[np.ndarray] = []
    for v in vecs:
        if v.shape != (dim,):
            raise LinalgError("inconsistent vector dimensions")
        nv = np.linalg.norm(v)
        if nv < tol:
            continue
        w = v / nv
        # two MGS passes for numerical stability
        for _ in range(2):
            for q in accepted:
                w = w - (q @ w) * q
        res = np.linalg.norm(w)
        if res < tol:
            continue
        accepted.append(w / res)
    cols = np.column_stack(accepted) if accepted else np.zeros((dim, 0))
    return Frame(dim, cols)


def projector(F: Frame) -> Projector:
    return Projector(F.columns @ F.columns.T, source_frame=F)


def operator_norm(M) -> float:
    """Largest singular value.

    Full SVD for dimension <= 64, power iteration on M^T M above (relative
    tolerance 1e-12, capped at 1e5 iterations).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    if max(M.shape) <= 64:
        return float(np.linalg.svd(M, compute_uv=False)[0]) if min(M.shape) else 0.0
    A = M.T @ M
    x = np.ones(A.shape[0])
    x /= np.linalg.norm(x)
    prev = 0.0
    for _ in range(100_000):
        y = A @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        val = float(x @ (A @ x))
        if abs(val - prev) <= 1e-12 * max(val, 1e-300):
            break
        prev = val
    return float(np.sqrt(max(val, 0.0)))


def projector_distance(P, Q) -> float:
    """||P - Q||; equals the sine of the largest principal angle for
    equal-rank projectors."""
    P = P.matrix if isinstance(P, Projector) else np.asarray(P, float)
    Q = Q.matrix if isinstance(Q, Projector) else np.asarray(Q, float)
    return operator_norm(P - Q)


def principal_angles(F1: Frame, F2: Frame) -> PrincipalAngleData:
    if F1.rank == 0 or F2.rank == 0:
        raise LinalgError("principal angles require nonzero-rank frames")
    s = np.linalg.svd(F1.columns.T @ F2.columns, compute_uv=False)
    return PrincipalAngleData(np.clip(s, 0.0, 1.0))


def matrix_power(M, e) -> np.ndarray:
    """M^e by repeated squaring for contractions; e is a nonnegative big int."""
    M = np.asarray(M, dtype=float)
    if e < 0:
        raise LinalgError("exponent must be >= 0")
    nrm = operator_norm(M)
    if nrm > 1 + CONTRACTION_TOL:
        raise LinalgError(f"matrix_power restricted to contractions (norm {nrm:.6e})")
    result = np.eye(M.shape[0])
    base = M.copy()
    while e:
        if e & 1:
            result = result @ base
        e >>= 1
        if e:
            base = base @ base
    return result


def alternating_limit(P: Projector, Q: Projector, tol: float = 1e-12,
                      max_squarings: int = 200):
    """Limit of (PQP)^n as n grows, by repeated squaring.

    Returns (limit, effective_power, converged).  The limit approximates the
    projector onto range(P) ∩ range(Q).
    """
    if tol <= 0:
        raise LinalgError("tol must be positive")
    T = P.matrix @ Q.matrix @ P.matrix
    power = 1
    for _ in range(max_squarings):
        T2 = T @ T
        if operator_norm(T2 - T) < tol:
            return T2, power * 2, True
        T = T2
        power *= 2
    return T, power, False


def intersection_frame(frames, tol: float = 1e-9) -> Frame:
    """Frame of the intersection of subspaces, via the kernel of sum(I - P_i)."""
    if not frames:
        raise LinalgError("need at least one frame")
    dim = frames[0].ambient_dim
    S = np.zeros((dim, dim))
    for F in frames:
        S += np.eye(dim) - F.columns @ F.columns.T
    vals, vecs = np.linalg.eigh(S)
    cols = vecs[:, vals < tol]
    if cols.shape[1] == 0:
        return Frame.zero(dim)
    return orthonormalize(list(cols.T))


def periodic_product_run(subspaces, schedule_period, z0, tol: float = 1e-10,
                         max_periods: int = 100_000) -> OrbitTrace:
    """Iterate projections cyclically through the period until Cauchy.

    The schedule uses 1-based indices into ``subspaces``.  The trace reports
    one checkpoint per period; the meta field carries the distance from the
    final iterate to the projection of z0 onto the intersection.
    """
    if not schedule_period:
        raise LinalgError("schedule period must be nonempty")
    projs = [(f.columns @ f.columns.T if isinstance(f, Frame) else f.matrix)
             for f in subspaces]
    for idx in schedule_period:
        if not 1 <= idx <= len(projs):
            raise LinalgError(f"schedule index {idx} out of range")
    z = np.asarray(z0, dtype=float).copy()
    target_frames = [f if isinstance(f, Frame) else f.source_frame for f in subspaces]
    inter = intersection_frame(target_frames) if all(t is not None for t in target_frames) else None
    z_target = (inter.columns @ (inter.columns.T @ np.asarray(z0, float))
                if inter is not None else None)
    trace = OrbitTrace(meta={"period": list(schedule_period)})
    pos = 0
    converged = False
    for _ in range(max_periods):
        z_prev = z.copy()
        for idx in schedule_period:
            z = projs[idx - 1] @ z
            pos += 1
        dist = float(np.linalg.norm(z - z_target)) if z_target is not None else float("nan")
        trace.append(Checkpoint(position=pos, block=0, norm=float(np.linalg.norm(z)),
                                dist_to_target=dist, vector=z.copy()))
        if np.linalg.norm(z - z_prev) < tol:
            converged = True
            break
    trace.converged = converged
    trace.cap_exceeded = not converged
    if z_target is not None:
        trace.meta["dist_to_intersection_projection"] = float(np.linalg.norm(z - z_target))
    return trace

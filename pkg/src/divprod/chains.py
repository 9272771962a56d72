"""Gluing block certificates into three subspaces with a divergent orbit.

Blocks live in coordinate windows E_1, ..., E_m that overlap in exactly one
coordinate: the step vector e_{i+1} is both the target of window i and the
start of window i+1, and windows two or more apart are orthogonal.  The
global spaces are then

    X = join of all block X spaces   (a plain coordinate subspace),
    Y = e_1 v (even-indexed block Y spaces) [v terminal cap],
    Z = join of odd-indexed block Y spaces  [v terminal cap],

and the schedule word applies each block's composite word with the W-slot
letter evaluated at Z (even blocks) or Y (odd blocks).

Because consecutive windows only share one coordinate, every letter except
the W-slot acts on a window exactly like the block-local operator.  The
orbit is therefore evaluated through the exact block-local engine plus a
certified deviation budget: the W-slot letter differs from the local plane
W_i by at most the measured ||Z P_{E_i} - W_i||, and the word-continuity
bound multiplies that by the slot-letter count N_i.  Traces carry the model
values together with the budget; at dense test scales the budget-free dense
route must agree, which the tests check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import mpmath
import numpy as np
from mpmath import mp

from . import words as W
from ._mp import log10_mpf
from .blocks import (
    BlockCertificate,
    WindowLayout,
    _GroupOps,
    _mpf,
    build_block,
    build_flag_resolved,
    k_of_eps,
)
from .linalg import Frame, orthonormalize
from .trace import Checkpoint, OrbitTrace

__all__ = [
    "ChainError",
    "ChainGeometry",
    "GluedTriple",
    "build_chain",
    "run_orbit",
    "verify_divergence",
    "densify_triple",
    "run_orbit_dense",
]


class ChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainGeometry:
    """Window layout of an m-block chain in one global coordinate system."""

    m: int
    k_list: tuple
    offsets: tuple          # global coordinate of each window start
    dims: tuple             # window dimensions 2(k_i + 2)
    D: int                  # total truncation dimension

    @classmethod
    def for_blocks(cls, k_list) -> "ChainGeometry":
        offsets = []
        pos = 0
        dims = []
        for k in k_list:
            offsets.append(pos)
            d = WindowLayout(k).dim
            dims.append(d)
            pos += d - 1        # consecutive windows share one coordinate
        D = pos + 1
        return cls(m=len(k_list), k_list=tuple(k_list), offsets=tuple(offsets),
                   dims=tuple(dims), D=D)

    def e_coord(self, i: int) -> int:
        """Global coordinate of the step vector e_i, i = 1..m+1."""
        if not 1 <= i <= self.m + 1:
            raise ChainError("step index out of range")
        if i <= self.m:
            return self.offsets[i - 1]
        return self.offsets[-1] + self.dims[-1] - 1

    def window_slice(self, i: int) -> slice:
        off = self.offsets[i - 1]
        return slice(off, off + self.dims[i - 1])

    def to_global(self, i: int, local: int) -> int:
        return self.offsets[i - 1] + local


@dataclass
class ChainBlock:
    index: int                      # 1-based
    cert: BlockCertificate
    parity: str                     # "odd" / "even"
    Psi: W.PowerWord                # schedule word (letters transposed for odd)
    slot_letter: int                # which letter of Psi carries the W slot

    @property
    def role_map(self) -> dict:
        if self.parity == "even":
            return {1: "Z", 2: "X", 3: "Y"}
        return {1: "Y", 2: "X", 3: "Z"}


@dataclass
class GluedTriple:
    geometry: ChainGeometry
    blocks: list
    eps_schedule: tuple
    delta: list                     # mpf per block (eps_i / N_i)
    eta: list                       # mpf per block
    slot_dev: list                  # mpf certified ||slot P_E - W_i|| bound
    guarantee: list                 # float certified ||Psi_i(...) e_i - e_{i+1}||
    cap_parity: str                 # which of Y/Z carries the terminal cap
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.geometry.m

    def schedule(self):
        return [(b.index, b.Psi, b.role_map) for b in self.blocks]

    def x_coords(self) -> list:
        out = []
        seen = set()
        for b in self.blocks:
            lay = b.cert.layout()
            for loc in lay.x_indices:
                g = self.geometry.to_global(b.index, loc)
                if g not in seen:
                    seen.add(g)
                    out.append(g)
        return sorted(out)

    def report_header(self) -> dict:
        return {
            "blocks": self.m,
            "eps_schedule": [float(e) for e in self.eps_schedule],
            "k_list": list(self.geometry.k_list),
            "dimension": self.geometry.D,
            "delta_log10": [float(log10_mpf(d)) for d in self.delta],
            "per_block_guarantee": list(self.guarantee),
        }


def build_chain(m: int, eps_schedule=None, eps_base: float = 9.0,
                eta_rule: str = "per-paper", eta_explicit=None,
                alpha0: float = 0.5, a: int = 1) -> GluedTriple:
    """Assemble an m-block chain.

    eps defaults to eps_base^{-i}.  The eta rule follows the gluing
    argument: eta_i = min(delta_{i-1}, delta_{i+1}) / 2 with delta_0 = 1,
    taken over the neighbors that exist in the truncation.  The missing
    forward neighbor of the last block is replaced by an exact terminal
    cap (the span of e_{m+1}), which contributes no deviation.
    """
    if m < 1:
        raise ChainError("m must be >= 1")
    if eps_schedule is None:
        eps_schedule = tuple(float(eps_base) ** -(i + 1) for i in range(m))
    eps_schedule = tuple(float(e) for e in eps_schedule)
    if any(not 0 < e < 1 for e in eps_schedule):
        raise ChainError("eps values must lie in (0,1)")
    if any(b >= a_ for a_, b in zip(eps_schedule, eps_schedule[1:])):
        pass  # nonincreasing is typical but not required for assembly
    k_list = [k_of_eps(e) for e in eps_schedule]
    geometry = ChainGeometry.for_blocks(k_list)

    # pass 1: flags determine N_i and hence delta_i = eps_i / N_i
    flags = [build_flag_resolved(k_i, eps_i, alpha0)
             for eps_i, k_i in zip(eps_schedule, k_list)]
    with mp.workdps(80):
        delta = [_mpf(e) / f.N for e, f in zip(eps_schedule, flags)]

        # pass 2: eta from existing neighbors, then the full blocks
        eta = []
        for i in range(1, m + 1):
            if eta_rule == "explicit":
                if eta_explicit is None or len(eta_explicit) != m:
                    raise ChainError("explicit eta rule needs m values")
                eta.append(_mpf(eta_explicit[i - 1]))
                continue
            cands = [mp.mpf(1) if i == 1 else delta[i - 2]]
            if i + 1 <= m:
                cands.append(delta[i])
            eta.append(min(cands) / 2)

    blocks = []
    for i in range(1, m + 1):
        cert = build_block(eps=eps_schedule[i - 1], eta=eta[i - 1],
                           alpha0=alpha0, a=a, _flag=flags[i - 1])
        parity = "even" if i % 2 == 0 else "odd"
        Psi = cert.psi if parity == "even" else W.transpose_letters(cert.psi, 1, 3)
        slot = 1 if parity == "even" else 3
        blocks.append(ChainBlock(index=i, cert=cert, parity=parity,
                                 Psi=Psi, slot_letter=slot))

    # certified slot deviations and per-block guarantees
    with mp.workdps(120):
        slot_dev = []
        guarantee = []
        for i in range(1, m + 1):
            dev = mp.mpf(0)
            for n in (i - 1, i + 1):
                if 1 <= n <= m:
                    dev += blocks[n - 1].cert.reduction.xy_distance
                # n == 0 is the exact span(e_1) piece; n == m+1 the exact cap
            bound_eta = mp.mpf(0)
            for n in (i - 1, i + 1):
                if 1 <= n <= m:
                    bound_eta += eta[n - 1]
            if not dev <= bound_eta:
                raise ChainError(f"slot deviation exceeds eta budget at block {i}")
            if not bound_eta <= delta[i - 1]:
                raise ChainError(f"eta budget exceeds delta at block {i}")
            slot_dev.append(dev)
            c = blocks[i - 1].cert
            g = _mpf(c.achieved_error) + c.N * dev
            if not g < 4 * _mpf(eps_schedule[i - 1]):
                raise ChainError(
                    f"certified per-block guarantee fails at block {i}: "
                    f"{mp.nstr(g, 8)} >= 4 eps")
            guarantee.append(float(g))

    cap_parity = "Y" if (m + 1) % 2 == 0 else "Z"
    return GluedTriple(geometry=geometry, blocks=blocks,
                       eps_schedule=eps_schedule, delta=delta, eta=eta,
                       slot_dev=slot_dev, guarantee=guarantee,
                       cap_parity=cap_parity,
                       meta={"alpha0": alpha0, "a": a, "eta_rule": eta_rule})


# ---------------------------------------------------------------------------
# structural orbit

def run_orbit(triple: GluedTriple, z0=None, checkpoint_policy: str = "per-run") -> OrbitTrace:
    """Run the schedule word on z0 (default: the first step vector e_1).

    The orbit is evaluated block-locally with a certified cross-window
    deviation budget (see the module docstring); checkpoints report the
    model values and carry the budget in ``err_budget``.  The structural
    route accepts z0 = e_1 (up to scale); arbitrary starts are supported by
    :func:`run_orbit_dense` at representable scales.
    """
    if checkpoint_policy not in ("per-run", "per-block"):
        raise ChainError("checkpoint policy must be per-run or per-block")
    geo = triple.geometry
    if z0 is None:
        amp0 = 1.0
    else:
        z0 = np.asarray(z0, float)
        if np.linalg.norm(z0) == 0:
            raise ChainError("z0 must be nonzero")
        e1 = np.zeros(geo.D)
        e1[geo.e_coord(1)] = 1.0
        if np.linalg.norm(z0 - (z0 @ e1) * e1) > 1e-12:
            raise ChainError("structural orbit supports starts along e_1; "
                             "use run_orbit_dense for general starts")
        amp0 = float(z0 @ e1)

    trace = OrbitTrace(meta={"policy": checkpoint_policy,
                             "eps_schedule": [float(e) for e in triple.eps_schedule]})
    position = 0
    budget = mp.mpf(0)
    amp = None
    for blk in triple.blocks:
        cert = blk.cert
        i = blk.index
        dps = max(cert.eval_dps, 120)
        with mp.workdps(dps):
            ub, vb = cert.flag.ub, cert.flag.vb
            if amp is None:
                xb = [mp.mpf(amp0) * u for u in ub]
            else:
                xb = [amp * u for u in ub]
            ops = _GroupOps(ub, vb, cert.reduction.gamma, cert.reduction.s,
                            cert.flag.r, dps)
            kk = cert.k
            letters_per_rep = [6 * s + 1 for s in cert.reduction.s]
            for j in range(1, kk + 1):
                xb = ops.apply_group(j, xb)
                position += cert.flag.r[j - 1] * letters_per_rep[j - 1]
                if checkpoint_policy == "per-run" or j == kk:
                    _record(trace, triple, i, position, xb, ub, vb, budget)
            # block done: certified word-continuity deviation for the slot
            # letter enters the budget, and the block-end checkpoint carries it
            budget += cert.N * triple.slot_dev[i - 1]
            trace.checkpoints[-1] = _make_ckpt(
                triple, i, position, xb, ub, vb, budget)
            # transition to the next window: keep the e_{i+1} component,
            # everything else moves into the budget (all later operators
            # are contractions)
            amp_next = mp.fsum(x * v for x, v in zip(xb, vb))
            tail_sq = mp.fsum(x * x for x in xb) - amp_next * amp_next
            budget += mp.sqrt(tail_sq) if tail_sq > 0 else mp.mpf(0)
            amp = amp_next
    trace.meta["final_amp"] = float(amp)
    trace.meta["final_budget"] = float(budget)
    return trace


def _block_probes(triple, i, xb, ub, vb):
    probes = []
    for j in range(1, triple.m + 2):
        if j == i:
            probes.append(float(mp.fsum(x * u for x, u in zip(xb, ub))))
        elif j == i + 1:
            probes.append(float(mp.fsum(x * v for x, v in zip(xb, vb))))
        else:
            probes.append(0.0)
    return tuple(probes)


def _make_ckpt(triple, i, position, xb, ub, vb, budget):
    norm = mp.sqrt(mp.fsum(x * x for x in xb))
    dist = mp.sqrt(mp.fsum((x - v) ** 2 for x, v in zip(xb, vb)))
    return Checkpoint(position=position, block=i, norm=float(norm),
                      dist_to_target=float(dist + budget),
                      weak_probes=_block_probes(triple, i, xb, ub, vb),
                      err_budget=float(budget))


def _record(trace, triple, i, position, xb, ub, vb, budget):
    trace.append(_make_ckpt(triple, i, position, xb, ub, vb, budget))


def verify_divergence(trace: OrbitTrace, triple: GluedTriple) -> dict:
    """Check the quantitative divergence signature of an orbit trace.

    Asserts, per prefix n: the block-end error bound 4 sum_{i<=n} eps_i; the
    norm floor 1 - (that bound); exact norm monotonicity of the model
    values; the non-Cauchy gap between consecutive block-end checkpoints;
    and the weak-convergence probes at the final checkpoint.
    """
    eps = triple.eps_schedule
    m = triple.m
    ends = {}
    for c in trace.checkpoints:
        ends[c.block] = c
    block_ends = [ends[i] for i in sorted(ends)]
    report = {"checks": [], "holds": True,
              "note": ("norm claims inside powered runs rely on contraction "
                       "monotonicity; cross-window deviation is certified by "
                       "the word-continuity budget and included in "
                       "dist_to_target and err_budget")}

    def add(name, ok, measured, bound):
        report["checks"].append({"name": name, "holds": bool(ok),
                                 "measured": float(measured), "bound": float(bound)})
        if not ok:
            report["holds"] = False

    cum = 0.0
    norm_floor_final = None
    for n, c in enumerate(block_ends, start=1):
        cum += 4 * eps[n - 1]
        add(f"block {n} end error <= 4*sum(eps)", c.dist_to_target <= cum,
            c.dist_to_target, cum)
        lb = c.norm - c.err_budget
        add(f"block {n} end norm >= 1 - bound", lb >= 1 - cum, lb, 1 - cum)
        norm_floor_final = 1 - cum
    ns = trace.norms()
    mono = all(b <= a + 1e-12 for a, b in zip(ns, ns[1:]))
    add("checkpoint norms nonincreasing", mono, 0.0 if mono else 1.0, 0.0)
    # non-Cauchy signature between consecutive block ends
    sq2 = float(np.sqrt(2.0))
    cum = 0.0
    bounds = []
    for n in range(1, len(block_ends) + 1):
        cum += 4 * eps[n - 1]
        bounds.append(cum)
    for n in range(1, len(block_ends)):
        gap_floor = sq2 - (bounds[n - 1] + bounds[n])
        add(f"non-Cauchy gap blocks {n}->{n + 1}", gap_floor > 0.4,
            gap_floor, 0.4)
    if block_ends:
        gap0 = sq2 - bounds[0]
        add("non-Cauchy gap start->block 1", gap0 > 0.4, gap0, 0.4)
    final = block_ends[-1] if block_ends else None
    if final is not None:
        for j, p in enumerate(final.weak_probes[: m], start=1):
            val = abs(p) + final.err_budget
            add(f"weak probe |<z, e_{j}>| <= bound", val <= min(bounds[-1], 0.5),
                val, min(bounds[-1], 0.5))
    report["norm_floor_final"] = norm_floor_final
    return report


# ---------------------------------------------------------------------------
# dense route (test scales)

def densify_triple(triple: GluedTriple):
    """Materialize X, Y, Z as dense frames; requires representable scales."""
    geo = triple.geometry
    D = geo.D
    X = Frame.from_coords(D, triple.x_coords())
    y_cols, z_cols = [], []
    e1 = np.zeros(D)
    e1[geo.e_coord(1)] = 1.0
    y_cols.append(e1)
    cap = np.zeros(D)
    cap[geo.e_coord(geo.m + 1)] = 1.0
    (y_cols if triple.cap_parity == "Y" else z_cols).append(cap)
    for blk in triple.blocks:
        cols = _dense_block_y(blk.cert, geo, blk.index)
        if blk.index % 2 == 0:
            y_cols.extend(cols)
        else:
            z_cols.extend(cols)
    Y = orthonormalize(y_cols, tol=1e-12)
    Z = orthonormalize(z_cols, tol=1e-12)
    return X, Y, Z


def _dense_flag_basis(cert: BlockCertificate) -> np.ndarray:
    """Flag orthonormal basis b_1..b_{k+2} in window coordinates (dense)."""
    lay = cert.layout()
    k = cert.k
    dim = lay.dim
    alphas = [float(a) for a in cert.flag.alphas]
    if any(a != 0 and a < 1e-14 for a in alphas):
        raise ChainError("flag scales below float64; dense route unavailable")
    xi = np.pi / (2 * k)
    gens = []
    for j in range(k + 1):
        g = np.zeros(dim)
        g[lay.u_index] = np.cos(j * xi)
        g[lay.v_index] = np.sin(j * xi)
        if j < k:
            g[lay.z_index(j)] += alphas[j]
        gens.append(g)
    u = np.zeros(dim)
    u[lay.u_index] = 1.0
    F = orthonormalize(gens + [u], tol=1e-15)
    if F.rank != k + 2:
        raise ChainError("dense flag basis lost rank")
    return F.columns


def _dense_block_y(cert: BlockCertificate, geo: ChainGeometry, index: int):
    """Columns of the block's Y space, embedded in global coordinates."""
    lay = cert.layout()
    B = _dense_flag_basis(cert)
    gammas = [float(g) for g in cert.reduction.gamma]
    if any(g == 0.0 for g in gammas):
        raise ChainError("gamma below float64; dense route unavailable")
    off = geo.offsets[index - 1]
    cols = []
    for l in range(cert.k + 2):
        g = gammas[l]
        col = np.zeros(geo.D)
        col[off: off + lay.dim] = B[:, l]
        col[off + lay.w_index(l + 1)] += g
        cols.append(col / np.sqrt(1 + g * g))
    return cols


def run_orbit_dense(triple: GluedTriple, z0, checkpoint_policy: str = "per-run",
                    collect_vectors: bool = False) -> OrbitTrace:
    """Exact dense evaluation of the schedule (test scales).

    Powered factors are evaluated through eigendecompositions of the
    symmetric products, so huge exponents cost O(D^3) once per run.
    """
    X, Y, Z = densify_triple(triple)
    geo = triple.geometry
    P = {"X": X.columns @ X.columns.T,
         "Y": Y.columns @ Y.columns.T,
         "Z": Z.columns @ Z.columns.T}
    z = np.asarray(z0, float).copy()
    if np.linalg.norm(z) == 0:
        raise ChainError("z0 must be nonzero")
    trace = OrbitTrace(meta={"route": "dense", "policy": checkpoint_policy})
    position = 0
    for blk in triple.blocks:
        cert = blk.cert
        roles = blk.role_map
        slotP = P[roles[1]]
        XX = P["X"]
        YY = P[roles[3]]
        # core = X * (a3 role) * X, diagonalized once per block
        core = XX @ YY @ XX
        vals, vecs = np.linalg.eigh((core + core.T) / 2)
        vals = np.clip(vals, 0.0, 1.0)
        tgt = np.zeros(geo.D)
        tgt[geo.e_coord(blk.index + 1)] = 1.0
        for j in range(1, cert.k + 1):
            s = cert.reduction.s[j - 1]
            r = cert.flag.r[j - 1]
            B = (vecs * _pow_vals(vals, s)) @ vecs.T
            G = B @ slotP @ B
            gv, gq = np.linalg.eigh((G + G.T) / 2)
            gv = np.clip(gv, 0.0, 1.0)
            T = (gq * _pow_vals(gv, r)) @ gq.T
            z = T @ z
            position += r * (6 * s + 1)
            if checkpoint_policy == "per-run" or j == cert.k:
                probes = _dense_probes(triple, z)
                trace.append(Checkpoint(
                    position=position, block=blk.index,
                    norm=float(np.linalg.norm(z)),
                    dist_to_target=float(np.linalg.norm(z - tgt)),
                    weak_probes=probes,
                    vector=z.copy() if collect_vectors else None))
    return trace


def _dense_probes(triple, z):
    geo = triple.geometry
    return tuple(float(z[geo.e_coord(j)]) for j in range(1, triple.m + 2))


def _pow_vals(vals, e):
    out = np.zeros_like(vals)
    for i, v in enumerate(vals):
        if v <= 0:
            out[i] = 0.0
        elif v >= 1:
            out[i] = 1.0
        else:
            le = float(e) * np.log(v)
            out[i] = np.exp(le) if le > -745 else 0.0
    return out


def chain_report(triple: GluedTriple, trace: OrbitTrace, verdict: dict,
                 config: dict) -> str:
    doc = {
        "schema": "divprod/chain-report/v1",
        "config": config,
        "chain": triple.report_header(),
        "verify": verdict,
        "final_checkpoint": {
            "position": str(trace.checkpoints[-1].position),
            "norm": trace.checkpoints[-1].norm,
            "dist_to_target": trace.checkpoints[-1].dist_to_target,
            "err_budget": trace.checkpoints[-1].err_budget,
        } if trace.checkpoints else None,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)

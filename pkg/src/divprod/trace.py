"""Checkpointed orbit traces shared by the baselines and the chain runner."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Checkpoint", "OrbitTrace"]


@dataclass
class Checkpoint:
    position: int              # global projection count (big int)
    block: int                 # 0 for baselines / single-system runs
    norm: float
    dist_to_target: float
    weak_probes: tuple = ()
    vector: np.ndarray | None = None
    err_budget: float = 0.0    # certified deviation radius of the model values


@dataclass
class OrbitTrace:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    converged: bool = False
    cap_exceeded: bool = False
    meta: dict = field(default_factory=dict)

    def append(self, ckpt: Checkpoint):
        if self.checkpoints:
            last = self.checkpoints[-1]
            if ckpt.position <= last.position:
                raise ValueError("checkpoint positions must be strictly increasing")
        self.checkpoints.append(ckpt)

    def norms(self):
        return [c.norm for c in self.checkpoints]

    def positions(self):
        return [c.position for c in self.checkpoints]

    def assert_norms_nonincreasing(self, slack=0.0):
        ns = self.norms()
        for a, b in zip(ns, ns[1:]):
            if b > a + slack:
                raise AssertionError(f"norm increased along trace: {a} -> {b}")

    def to_csv(self) -> str:
        """Schema: position,block,norm,dist_to_target,probe_e1,...,probe_emN."""
        nprobe = max((len(c.weak_probes) for c in self.checkpoints), default=0)
        header = ["position", "block", "norm", "dist_to_target"]
        header += [f"probe_e{j + 1}" for j in range(nprobe)]
        lines = [",".join(header)]
        for c in self.checkpoints:
            row = [str(c.position), str(c.block), _f(c.norm), _f(c.dist_to_target)]
            probes = list(c.weak_probes) + [0.0] * (nprobe - len(c.weak_probes))
            row += [_f(p) for p in probes]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "checkpoints": [
                {
                    "position": str(c.position),
                    "block": c.block,
                    "norm": c.norm,
                    "dist_to_target": c.dist_to_target,
                    "weak_probes": list(c.weak_probes),
                    "err_budget": c.err_budget,
                }
                for c in self.checkpoints
            ],
            "converged": self.converged,
            "cap_exceeded": self.cap_exceeded,
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _f(x: float) -> str:
    return format(float(x), ".17g")

"""Analytic-versus-numeric gradient verification for whole models.

The sweep walks every named parameter of a module, samples a handful of
coordinates from each, and compares the autograd partial derivative against
a central finite difference of the same objective. The two routes share no
code: autograd differentiates the graph, the numeric side re-evaluates the
objective with the parameter nudged in place.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np
import torch

from .numerics import central_difference


@dataclass
class CoordRecord:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradReport:
    records: List[CoordRecord] = field(default_factory=list)
    failures: List[CoordRecord] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.records), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        return (
            f"{len(self.records)} coordinates over "
            f"{len({r.name for r in self.records})} parameters, "
            f"max rel err {self.max_rel_err:.3e}, "
            f"{len(self.failures)} failures, {self.seconds:.1f}s"
        )


def relative_error(a: float, n: float, atol: float, rtol: float) -> float:
    # |a-n| <= rtol*max(|a|,|n|) + atol, rewritten as a single ratio so a
    # plain threshold comparison works.
    return abs(a - n) / (max(abs(a), abs(n)) + atol / rtol)


def check_model_gradients(
    model: torch.nn.Module,
    objective: Callable[[], torch.Tensor],
    coords_per_param: int = 3,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    seed: int = 0,
) -> GradReport:
    """Compare autograd gradients with central differences.

    The objective must be a deterministic closure over the model's current
    parameters (fixed data, fixed noise). Works best with the model built in
    float64; at float32 the difference quotient itself carries ~1e-3 noise,
    which the tolerance here does not budget for.
    """
    rng = np.random.default_rng(seed)
    report = GradReport()
    t0 = time.time()

    model.zero_grad(set_to_none=True)
    loss = objective()
    loss.backward()

    for name, param in model.named_parameters():
        if param.numel() == 0:
            continue
        n_coords = min(coords_per_param, param.numel())
        flat_ids = rng.choice(param.numel(), size=n_coords, replace=False)
        grad = param.grad
        for flat in flat_ids:
            idx = np.unravel_index(int(flat), param.shape)
            analytic = 0.0 if grad is None else float(grad[idx])
            numeric = central_difference(objective, param.data, idx, h)
            err = relative_error(analytic, numeric, atol, rtol)
            rec = CoordRecord(name, idx, analytic, numeric, err)
            report.records.append(rec)
            if err > rtol:
                report.failures.append(rec)

    model.zero_grad(set_to_none=True)
    report.seconds = time.time() - t0
    return report

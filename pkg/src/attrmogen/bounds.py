"""Exact verification of two information inequalities on small discrete tables.

* Entropy bound: ``I(S;A) <= ln|A| - E_s H(A|S=s)``.
* KL bound: ``I(X;S) <= E_x E_x' KL(p(S|x) || p(S|x'))``.

Everything is plain summation in float64 with natural logs and ``0 log 0 = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

TOL = 1e-9


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    mask = np.broadcast_to(x > 0, out.shape)
    xb, yb = np.broadcast_to(x, out.shape), np.broadcast_to(y, out.shape)
    out[mask] = xb[mask] * np.log(yb[mask])
    return out


def check_joint(joint) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or min(p.shape) < 1 or max(p.shape) > 16:
        raise ParameterError(f"joint must be a 2-D table with each side in [1, 16], got {p.shape}")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ParameterError("joint has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ParameterError(f"joint sums to {p.sum()!r}, not 1")
    return p


def entropy(p) -> float:
    p = np.asarray(p, np.float64)
    return float(-_xlogy(p, p).sum())


def mutual_information(joint) -> float:
    """Plug-in ``I`` between the row and column variables of a joint table."""
    p = check_joint(joint)
    pr = p.sum(axis=1, keepdims=True)
    pc = p.sum(axis=0, keepdims=True)
    denom = pr * pc
    ratio = np.divide(p, denom, out=np.ones_like(p), where=p > 0)
    return max(float(_xlogy(p, ratio).sum()), 0.0)


def kl_divergence(p, q) -> float:
    """``KL(p || q)``; ``inf`` when q vanishes where p does not."""
    p = np.asarray(p, np.float64)
    q = np.asarray(q, np.float64)
    if np.any((p > 0) & (q <= 0)):
        return float("inf")
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool
    flagged: bool = False

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


def verify_entropy_bound(joint_sa) -> BoundCheck:
    """Rows index S, columns index A."""
    p = check_joint(joint_sa)
    lhs = mutual_information(p)
    ps = p.sum(axis=1)
    n_a = p.shape[1]
    cond_entropy = 0.0
    for s in range(p.shape[0]):
        if ps[s] > 0:
            cond_entropy += ps[s] * entropy(p[s] / ps[s])
    rhs = float(np.log(n_a) - cond_entropy)
    return BoundCheck(lhs, rhs, lhs <= rhs + TOL)


def verify_kl_bound(conditionals, marginal_x) -> BoundCheck:
    """``conditionals[x]`` is ``p(S|x)``; ``marginal_x`` is ``p(x)``."""
    cond = np.asarray(conditionals, np.float64)
    px = np.asarray(marginal_x, np.float64)
    if cond.ndim != 2 or px.shape != (cond.shape[0],):
        raise ParameterError("conditionals must be |X| x |S| and marginal_x length |X|")
    if np.any(cond < 0) or np.any(np.abs(cond.sum(axis=1) - 1) > 1e-12):
        raise ParameterError("each conditional must be a probability vector")
    lhs = mutual_information(px[:, None] * cond / (px[:, None] * cond).sum())
    rhs = 0.0
    flagged = False
    for i in range(len(px)):
        for j in range(len(px)):
            if px[i] == 0 or px[j] == 0:
                continue
            kl = kl_divergence(cond[i], cond[j])
            if np.isinf(kl):
                flagged = True
            rhs += px[i] * px[j] * kl
    return BoundCheck(lhs, float(rhs), bool(lhs <= rhs + TOL), flagged)


def random_joint(rng: np.random.Generator, max_side: int = 8) -> np.ndarray:
    shape = rng.integers(1, max_side + 1, size=2)
    p = rng.dirichlet(np.full(int(np.prod(shape)), 0.5)).reshape(shape)
    return p / p.sum()


def random_ensemble(rng: np.random.Generator, max_side: int = 8):
    nx, ns = (int(v) for v in rng.integers(1, max_side + 1, size=2))
    cond = rng.dirichlet(np.full(ns, 0.7), size=nx)
    # Sparse rows exercise the infinite-KL branch.
    if rng.random() < 0.2 and ns > 1:
        cond[0, rng.integers(ns)] = 0.0
        cond[0] /= cond[0].sum()
    px = rng.dirichlet(np.ones(nx))
    return cond, px


def run_bound_suite(entropy_trials: int = 1000, kl_trials: int = 200, seed: int = 0) -> dict:
    """Seeded sweep over random tables; returns counts and worst-case slack per bound."""
    rng = np.random.default_rng(seed)
    ent = [verify_entropy_bound(random_joint(rng)) for _ in range(entropy_trials)]
    kl = [verify_kl_bound(*random_ensemble(rng)) for _ in range(kl_trials)]

    def summary(checks):
        finite = [c.slack for c in checks if np.isfinite(c.slack)]
        return {
            "trials": len(checks),
            "violations": sum(not c.holds for c in checks),
            "worst_slack": min(finite) if finite else float("nan"),
            "flagged": sum(c.flagged for c in checks),
        }

    return {"entropy_bound": summary(ent), "kl_bound": summary(kl)}

"""Finite-difference verification of every differentiable primitive.

Each check draws fresh random inputs, back-propagates a scalar reduction of
the op's output, and compares one randomly chosen coordinate of every input
gradient against a central difference.  Non-scalar outputs are contracted
with a fixed random weight tensor so every output element contributes.

Primitives are looked up on :mod:`ssdas.numerics` at call time, so a patched
rule is what gets checked.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import alignment as al
from . import numerics as nx
from .jigsaw import build_permutation_set, shuffle_batch
from .nets import JigsawClassifier, SegModel

STEP = 1e-5
TOLERANCE = 1e-4
# Below this magnitude errors are compared absolutely; both gradients are
# then indistinguishable from zero at this step size.
FLOOR = 1e-6
# Coordinates whose step straddles a ReLU kink are redrawn at most this often.
MAX_REDRAWS = 5

Builder = Callable[[np.random.Generator], Tuple[Callable[..., nx.Tensor], List[np.ndarray]]]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    points: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def _central(f, arrays, i: int, j: int, h: float) -> float:
    vals = [a.copy() for a in arrays]
    flat = vals[i].reshape(-1)
    x0 = flat[j]
    flat[j] = x0 + h
    up = f(vals)
    flat[j] = x0 - h
    return (up - f(vals)) / (2 * h)


def _scalar(out: nx.Tensor, weight: np.ndarray) -> nx.Tensor:
    if out.ndim == 0:
        return out
    return nx.tsum(nx.mul(out, weight))


def check(name: str, build: Builder, rng: np.random.Generator, points: int = 100,
          h: float = STEP) -> CheckResult:
    """Worst relative error of ``build``'s op over ``points`` random draws."""
    t0 = time.perf_counter()
    worst, skipped = 0.0, 0
    for _ in range(points):
        fn, arrays = build(rng)
        leaves = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        weight = rng.standard_normal(out.shape)
        loss = _scalar(out, weight)
        nx.backward(loss)

        def f(vals):
            with nx.no_grad():
                return _scalar(fn(*[nx.Tensor(v) for v in vals]), weight).item()

        for i, leaf in enumerate(leaves):
            grad = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
            for _attempt in range(MAX_REDRAWS):
                j = int(rng.integers(leaf.size))
                numeric = _central(f, arrays, i, j, h)
                # A kink inside [x-h, x+h] shows up as disagreement with the half step.
                if rel_err(numeric, _central(f, arrays, i, j, h / 2)) < TOLERANCE:
                    break
                skipped += 1
            worst = max(worst, rel_err(float(grad.reshape(-1)[j]), numeric))
    return CheckResult(name, worst, points, skipped, time.perf_counter() - t0)


# --- builders -------------------------------------------------------------------------
def _away_from_zero(rng, shape, margin=0.05):
    """Normal draws pushed off the ReLU kink so a step of ``h`` never crosses it."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def _probs(rng, shape, axis=-1):
    z = rng.standard_normal(shape)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _composed(rng, scope_term: bool = False):
    """Supervised and alignment losses through a small G and two jigsaw classifiers.

    With ``scope_term`` the loss is the unlabeled term that stops gradient at
    ``J_s``; only G's parameters are then perturbed, since a finite difference
    cannot see the stop.
    """
    b, cls, size = 4, 3, 8
    seed = int(rng.integers(1 << 31))
    G = SegModel(cls, seed=seed, widths=(6, 8))
    pset = build_permutation_set(2, 24, seed=0)
    J_s = JigsawClassifier(cls, 2, 24, (size, size), seed=seed + 1, hidden=6)
    J_t = JigsawClassifier(cls, 2, 24, (size, size), seed=seed + 2, hidden=6)
    modules = (G,) if scope_term else (G, J_s, J_t)
    names = [(m, n) for m in modules for n, _ in m.named_parameters()]
    x = rng.random((3 * b, 3, size, size))
    y = rng.integers(0, cls, size=(2 * b, size, size))
    lab = rng.integers(0, 24, size=(3, b))
    cds = rng.random(b)
    m_rm = (rng.random(b) < 0.7).astype(float)
    m_add = (rng.random(b) < 0.5).astype(float)

    def fn(*leaves):
        for (m, n), leaf in zip(names, leaves):
            setattr(m, n, leaf)
        P = G(nx.Tensor(x))
        pz = [al.PuzzleBatch(shuffle_batch(P[i * b:(i + 1) * b], pset, lab[i]), lab[i]) for i in range(3)]
        admitted, rest = al.unlabeled_flow_loss(pz[2], J_s, m_add, 0.1)
        if scope_term:
            return rest
        sup = nx.mean(nx.cross_entropy(P[:2 * b], y, axis=1))
        return sup + al.labeled_flow_loss(pz[0], pz[1], J_s, J_t, cds, m_rm, 0.1) + admitted

    return fn, [getattr(m, n).data.copy() for m, n in names]


def builders() -> Dict[str, Builder]:
    return {
        "add_broadcast": lambda r: (nx.add, [r.standard_normal((3, 4)), r.standard_normal((4,))]),
        "sub": lambda r: (lambda a, b: a - b, [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
        "mul_broadcast": lambda r: (nx.mul, [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
        "div_scalar": lambda r: (lambda a: a / 3.0, [r.standard_normal((5,))]),
        "neg": lambda r: (nx.neg, [r.standard_normal((4,))]),
        "relu": lambda r: (nx.relu, [_away_from_zero(r, (3, 5))]),
        "exp": lambda r: (nx.exp, [r.standard_normal((6,))]),
        "log": lambda r: (nx.log, [r.random((6,)) + 0.1]),
        "matmul": lambda r: (nx.matmul, [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        "sum_axis": lambda r: (lambda a: nx.tsum(a, axis=1), [r.standard_normal((3, 4, 2))]),
        "mean_axes": lambda r: (lambda a: nx.mean(a, axis=(0, 2)), [r.standard_normal((3, 4, 2))]),
        "reshape": lambda r: (lambda a: nx.reshape(a, (4, 6)), [r.standard_normal((2, 3, 4))]),
        "transpose": lambda r: (lambda a: nx.transpose(a, (2, 0, 1)), [r.standard_normal((2, 3, 4))]),
        "getitem": lambda r: (lambda a: a[1:, ::2], [r.standard_normal((4, 5))]),
        "gather": lambda r: (lambda a, idx=r.integers(0, 12, size=(3, 5)): nx.gather(a, idx),
                             [r.standard_normal((3, 4))]),
        "concat": lambda r: (lambda a, b: nx.concat([a, b], axis=1),
                             [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
        "softmax": lambda r: (lambda a: nx.softmax(a, axis=1), [r.standard_normal((3, 5, 2))]),
        "cross_entropy": lambda r: (
            lambda p, lab=r.integers(0, 4, size=(3, 2)): nx.cross_entropy(p, lab, axis=1),
            [_probs(r, (3, 4, 2), axis=1)]),
        "conv2d": lambda r: (nx.conv2d, [r.standard_normal((2, 3, 5, 5)), r.standard_normal((4, 3, 3, 3)),
                                         r.standard_normal((4,))]),
        "conv2d_1x1": lambda r: (nx.conv2d, [r.standard_normal((1, 2, 4, 4)), r.standard_normal((3, 2, 1, 1))]),
        "avg_pool_grid": lambda r: (lambda a: nx.avg_pool_grid(a, 2), [r.standard_normal((2, 3, 4, 6))]),
        "linear": lambda r: (nx.linear, [r.standard_normal((3, 5)), r.standard_normal((2, 5)), r.standard_normal((2,))]),
        "jigsaw_shuffle": lambda r: (
            lambda a, lab=r.integers(0, 24, size=2): shuffle_batch(a, build_permutation_set(2, 24), lab),
            [r.standard_normal((2, 3, 4, 4))]),
        "composed_G_J": _composed,
        "composed_scope": lambda r: _composed(r, scope_term=True),
    }


def run_suite(seed: int = 0, points: int = 100, names: Sequence[str] = ()) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    table = builders()
    chosen = names or tuple(table)
    return [check(name, table[name], rng, points) for name in chosen]


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<16} {'max_rel_err':>12} {'points':>6} {'kinks':>5}  status"]
    for r in results:
        lines.append(f"{r.name:<16} {r.max_rel_err:12.3e} {r.points:6d} {r.skipped:5d}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    bad = sum(not r.passed for r in results)
    lines.append(f"{len(results) - bad}/{len(results)} passed")
    return "\n".join(lines)

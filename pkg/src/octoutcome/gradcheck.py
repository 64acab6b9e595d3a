"""Finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_compared: int
    n_excluded: int
    finite: bool = True

    def passed(self, tol: float = 1e-5, min_compared: int = 100) -> bool:
        """Within ``tol`` on at least ``min_compared`` coordinates, with exclusions rare (< 10%)."""
        total = self.n_compared + self.n_excluded
        return (self.finite and self.max_rel_error <= tol and self.n_compared >= min_compared
                and self.n_excluded <= 0.1 * total)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-4,
              tol: float = 1e-5, refinements: int = 2) -> GradcheckResult:
    """Compare autodiff gradients of scalar ``fn(*tensors)`` with central differences.

    ``inputs`` must be float64 arrays. Autodiff runs in float64; the finite
    differences are evaluated in extended precision (``np.longdouble``), so
    their rounding error stays far below the tolerance even for gradient
    entries near zero. Each coordinate is perturbed by ``step * max(1, |x|)``. When a comparison misses ``tol`` the step is shrunk
    by 10x up to ``refinements`` times, which separates truncation error and
    accidental kink crossings from wrong gradients. A coordinate whose
    one-sided derivatives still disagree at the finest step sits on a
    non-differentiable point (relu at 0, a max-pool tie) and is excluded.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        return GradcheckResult(float("inf"), 0, 0, finite=False)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    if not all(np.all(np.isfinite(g)) for g in analytic):
        return GradcheckResult(float("inf"), 0, 0, finite=False)

    wide = [a.astype(np.longdouble) for a in arrays]

    def evaluate():
        return fn(*[Tensor(a) for a in wide]).data.astype(np.longdouble).reshape(-1)[0]

    worst, compared, excluded = 0.0, 0, 0
    for a, grad in zip(wide, analytic):
        flat, gflat = a.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            h = step * max(1.0, abs(x0))
            best = np.inf
            for _ in range(refinements + 1):
                flat[i] = x0 + h
                f_plus = evaluate()
                flat[i] = x0 - h
                f_minus = evaluate()
                flat[i] = x0
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    return GradcheckResult(float("inf"), compared, excluded, finite=False)
                err = relative_error(gflat[i], float((f_plus - f_minus) / (2 * h)))
                best = min(best, err)
                if best <= tol:
                    break
                last_h, h = h, h / 10.0
            if best > tol:
                f0 = evaluate()
                forward = float((f_plus - f0) / last_h)
                backward = float((f0 - f_minus) / last_h)
                if abs(forward - backward) > 1e-3 * max(1.0, abs(forward), abs(backward)):
                    excluded += 1
                    continue
            worst = max(worst, best)
            compared += 1
    return GradcheckResult(worst, compared, excluded)


def _projected(fn, rng, shape):
    """Scalar probe sum(fn(...) * R) with a fixed random R, so every output entry matters."""
    R = Tensor(rng.standard_normal(shape))
    return lambda *ts: (fn(*ts) * R).sum()


def verification_suite(seed: int = 0, tol: float = 1e-5) -> "dict[str, GradcheckResult]":
    """Gradient checks for every layer kind plus a small CBR-style network.

    Each case probes at least 100 input coordinates in float64.
    """
    from . import functional as F

    rng = np.random.default_rng(seed)
    g = rng.standard_normal
    cases = {}

    x = g((2, 3, 6, 6))
    w = g((4, 3, 3, 3))
    cases["conv2d"] = (_projected(lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1), rng, (2, 4, 6, 6)),
                       [x, w, g(4)])
    cases["conv2d_strided"] = (_projected(lambda x, w: F.conv2d(x, w, stride=2, padding=1), rng, (2, 4, 3, 3)),
                               [x, w])
    cases["conv2d_1x1"] = (_projected(lambda x, w: F.conv2d(x, w), rng, (2, 5, 6, 6)), [x, g((5, 3, 1, 1))])

    def bn(x, gamma, beta):
        return F.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True)

    cases["batch_norm"] = (_projected(bn, rng, x.shape), [x, g(3) + 1.0, g(3)])
    cases["batch_norm_eval"] = (
        _projected(lambda x, gamma, beta: F.batch_norm(x, gamma, beta, np.full(3, 0.1), np.full(3, 2.0), False),
                   rng, x.shape), [x, g(3), g(3)])
    cases["relu"] = (_projected(F.relu, rng, x.shape), [x])
    cases["max_pool2d"] = (_projected(lambda x: F.max_pool2d(x, 2), rng, (2, 3, 3, 3)), [x])
    cases["max_pool2d_overlapping"] = (_projected(lambda x: F.max_pool2d(x, 3, 2, 1), rng, (2, 3, 3, 3)), [x])
    cases["global_avg_pool"] = (_projected(F.global_avg_pool, rng, (2, 3)), [x])
    cases["linear"] = (_projected(F.linear, rng, (6, 4)), [g((6, 10)), g((4, 10)), g(4)])
    cases["sigmoid"] = (_projected(F.sigmoid, rng, (10, 12)), [g((10, 12))])
    targets = (rng.random(120) < 0.5).astype(float)
    cases["bce_with_logits"] = (lambda z: F.bce_with_logits(z, targets), [3 * g(120)])
    cases["cosine_similarity"] = (_projected(F.cosine_similarity, rng, (8,)), [g((8, 7)), g((8, 7))])
    cases["residual_add"] = (_projected(lambda a, b: F.relu(a + b), rng, x.shape), [x, g(x.shape)])

    labels = np.array([0.0, 1.0, 1.0])

    def cbr_net(x, w1, g1, b1, w2, g2, b2, wd, bd):
        h = F.max_pool2d(F.relu(F.batch_norm(F.conv2d(x, w1, padding=1), g1, b1, np.zeros(4), np.ones(4), True)), 2)
        h = F.max_pool2d(F.relu(F.batch_norm(F.conv2d(h, w2, padding=1), g2, b2, np.zeros(6), np.ones(6), True)), 2)
        z = F.linear(F.global_avg_pool(h), wd, bd).reshape(-1)
        return F.bce_with_logits(z, labels)

    cases["cbr_composite"] = (cbr_net, [g((3, 3, 8, 8)), 0.5 * g((4, 3, 3, 3)), g(4) + 1, g(4),
                                        0.5 * g((6, 4, 3, 3)), g(6) + 1, g(6), g((1, 6)), np.zeros(1)])
    return {name: gradcheck(fn, inputs, tol=tol) for name, (fn, inputs) in cases.items()}

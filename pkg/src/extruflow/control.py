"""Box-constrained tracking of a width reference.

The width states are eliminated (``w = M @ xi + m``), leaving a dense
least-squares problem over the extrusion ratios with simple bounds. It is
solved by Barzilai-Borwein projected gradient followed by a projected-Newton
active-set polish, which lands on the exact optimum for the final active set.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .corners import WidthReference
from .dynamics import ControlSequence, ExtrusionModel, StabilityError, WidthProfile

log = logging.getLogger(__name__)

KKT_TOL = 1e-8
MAX_HORIZON = 500  # longer lines are solved in chained chunks
MIN_RUN = 3  # monotone runs shorter than this, between opposite runs, are "mixed"
_DIRECTIONS = ("expand", "shrink", "mixed")


@dataclass
class TrackingProblem:
    reference: np.ndarray  # w*_k compared with w_{k+1}
    model: ExtrusionModel
    bounds: tuple[float, float] | None = None
    w0: float = 0.0
    step: float = 0.1
    lengths: np.ndarray | None = None
    direction: object = "mixed"  # one of _DIRECTIONS or a label per step

    def __post_init__(self):
        if isinstance(self.reference, WidthReference):
            self.reference = self.reference.target
        self.reference = np.asarray(self.reference, dtype=float)
        if self.reference.ndim != 1 or len(self.reference) == 0:
            raise ValueError("reference must be a nonempty 1-D sequence")
        if self.bounds is None:
            self.bounds = (self.model.xi_low, self.model.xi_high)
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError(f"invalid bounds {self.bounds}")
        if not self.w0 >= 0:
            raise ValueError("initial width must be non-negative")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.lengths is None:
            self.lengths = np.full(len(self.reference), float(self.step))
        else:
            self.lengths = np.asarray(self.lengths, dtype=float)
            if self.lengths.shape != self.reference.shape:
                raise ValueError("one segment length per reference sample is required")

    @property
    def horizon(self) -> int:
        return len(self.reference)

    def labels(self) -> np.ndarray:
        if isinstance(self.direction, str):
            if self.direction not in _DIRECTIONS:
                raise ValueError(f"unknown direction {self.direction!r}")
            return np.full(self.horizon, self.direction, dtype=object)
        labels = np.asarray(self.direction, dtype=object)
        if labels.shape != (self.horizon,):
            raise ValueError("one direction label per step is required")
        return labels

    def dynamics(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-step (A_k, B_k)."""
        taus = {d: self.model.tau(d) for d in _DIRECTIONS}
        tau = np.array([taus[d] for d in self.labels()])
        bad = self.lengths >= tau
        if np.any(bad):
            k = int(np.argmax(bad))
            raise StabilityError(f"step {self.lengths[k]} mm at index {k} is not below tau = {tau[k]} mm")
        r = self.lengths / tau
        return 1.0 - r, self.model.alpha * r


@dataclass
class Solution:
    xi: np.ndarray
    w_pred: np.ndarray  # w_0..w_N from the linear model (may dip below 0)
    reference: np.ndarray
    lengths: np.ndarray
    objective: float
    kkt_residual: float
    labels: np.ndarray | None = None
    iterations: int = 0
    step: float = 0.1
    notes: list[str] = field(default_factory=list)

    @property
    def controls(self) -> ControlSequence:
        return ControlSequence(self.xi, self.step, self.lengths)

    @property
    def predicted(self) -> WidthProfile:
        x = np.concatenate([[0.0], np.cumsum(self.lengths)])
        return WidthProfile(x, np.clip(self.w_pred, 0.0, None))

    @property
    def rmse(self) -> float:
        return math.sqrt(float(np.mean((self.w_pred[1:] - self.reference) ** 2)))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x_mm", "xi", "w_pred_mm", "w_ref_mm"])
        x = np.cumsum(self.lengths)
        for k in range(len(self.xi)):
            writer.writerow([f"{x[k]:.6f}", f"{self.xi[k]:.8f}", f"{self.w_pred[k + 1]:.6f}",
                             f"{self.reference[k]:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def condense(A: np.ndarray, B: np.ndarray, w0: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (M, m) with w_{1..N} = M @ xi + m for w_{k+1} = A_k w_k + B_k xi_k."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    logp = np.cumsum(np.log(A))  # log of A_0 * ... * A_k
    # M[k, j] = A_{j+1} ... A_k * B_j for j <= k
    M = np.exp(logp[:, None] - logp[None, :]) * B[None, :]
    M = np.tril(M)
    m = np.exp(logp) * w0
    return M, m


def propagate(A, B, xi, w0: float) -> np.ndarray:
    w = np.empty(len(xi) + 1)
    w[0] = w0
    for k in range(len(xi)):
        w[k + 1] = A[k] * w[k] + B[k] * xi[k]
    return w


def kkt_residual(grad: np.ndarray, x: np.ndarray, lo: float, hi: float) -> float:
    """Infinity norm of x - P(x - grad): zero exactly at a KKT point."""
    if len(x) == 0:
        return 0.0
    return float(np.max(np.abs(x - np.clip(x - grad, lo, hi))))


def solve_box_lsq(M: np.ndarray, b: np.ndarray, lo: float, hi: float, x0=None,
                  tol: float = KKT_TOL, max_pg: int = 2000, max_polish: int = 200):
    """Minimize ||M x - b||^2 subject to lo <= x <= hi.

    Returns (x, kkt_residual, iterations). The gradient used for the KKT
    test is that of the un-halved objective, 2 M^T (M x - b).
    """
    n = M.shape[1]
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), lo, hi)

    def grad(v):
        return 2.0 * (M.T @ (M @ v - b))

    def f(v):
        r = M @ v - b
        return float(r @ r)

    # Barzilai-Borwein projected gradient, cheap warm start for the active set
    # ||M||_2^2 <= ||M||_1 ||M||_inf; an upper bound is all the step rule needs
    lip = 2.0 * float(np.abs(M).sum(axis=0).max() * np.abs(M).sum(axis=1).max())
    g = grad(x)
    alpha = 1.0 / max(lip, 1e-300)
    it = 0
    for it in range(1, max_pg + 1):
        x_new = np.clip(x - alpha * g, lo, hi)
        g_new = grad(x_new)
        s, y = x_new - x, g_new - g
        x, g = x_new, g_new
        if kkt_residual(g, x, lo, hi) <= 1e-3 * tol:
            break
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 1.0 / lip
        if it >= 50 and it % 25 == 0:
            break  # hand over to the active-set phase early; it converges faster

    # projected Newton on the free variables (Bertsekas-style active set)
    fx = f(x)
    for k in range(max_polish):
        g = grad(x)
        res = kkt_residual(g, x, lo, hi)
        if res <= 1e-3 * tol:
            return x, res, it + k
        eps = min(1e-10 * (hi - lo) + res, 1e-3 * (hi - lo))
        at_lo = (x <= lo + eps) & (g > 0)
        at_hi = (x >= hi - eps) & (g < 0)
        free = ~(at_lo | at_hi)
        target = x.copy()
        target[at_lo] = lo
        target[at_hi] = hi
        if np.any(free):
            fixed = ~free
            rhs = b - M[:, fixed] @ target[fixed]
            sol, *_ = linalg.lstsq(M[:, free], rhs, lapack_driver="gelsy")
            target[free] = sol
        d = target - x
        t = 1.0
        accepted = False
        while t > 1e-12:
            cand = np.clip(x + t * d, lo, hi)
            fc = f(cand)
            if fc <= fx + 1e-15 * max(1.0, fx):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # fall back to a projected-gradient step
            cand = np.clip(x - g / lip, lo, hi)
            fc = f(cand)
        if np.array_equal(cand, x):
            break
        x, fx = cand, fc
    g = grad(x)
    return x, kkt_residual(g, x, lo, hi), it + max_polish


def solve(problem: TrackingProblem) -> Solution:
    """Optimal extrusion ratios for one tracking problem.

    Horizons longer than MAX_HORIZON are split into consecutive chunks, each
    starting from the predicted width where the previous one ended.
    """
    if problem.horizon == 0:
        raise ValueError("empty horizon")
    A, B = problem.dynamics()
    lo, hi = problem.bounds
    ref = problem.reference
    n = problem.horizon
    xi = np.empty(n)
    w0 = problem.w0
    worst, iters = 0.0, 0
    notes = []
    for s in range(0, n, MAX_HORIZON):
        e = min(n, s + MAX_HORIZON)
        M, m = condense(A[s:e], B[s:e], w0)
        x, res, it = solve_box_lsq(M, ref[s:e] - m, lo, hi)
        if res > KKT_TOL:
            notes.append(f"chunk {s}-{e}: KKT residual {res:.3g} above tolerance")
            log.warning("KKT residual %.3g above tolerance on chunk %d-%d", res, s, e)
        xi[s:e] = x
        worst = max(worst, res)
        iters += it
        w0 = float(M[-1] @ x + m[-1])
    if n > MAX_HORIZON:
        notes.append(f"horizon {n} solved in {math.ceil(n / MAX_HORIZON)} chained chunks")
    w = propagate(A, B, xi, problem.w0)
    obj = float(np.sum((w[1:] - ref) ** 2))
    return Solution(xi, w, ref.copy(), problem.lengths.copy(), obj, worst, problem.labels(),
                    iters, problem.step, notes)


def regime_labels(reference, w0: float = 0.0, min_run: int = MIN_RUN) -> np.ndarray:
    """Direction label per step from the monotonicity of the reference.

    Step k moves the width from w_k toward w*_k, so its direction is the sign
    of w*_k - w*_{k-1} (w0 before the first sample). Flat steps inherit the
    sign of the next change (the controller is preparing for it); trailing
    flat steps keep the last sign. Short runs squeezed between runs of the
    opposite sign are labelled mixed.
    """
    ref = np.asarray(reference, dtype=float)
    prev = np.concatenate([[w0], ref[:-1]])
    d = ref - prev
    scale = max(float(np.max(np.abs(ref))), abs(w0), 1e-12)
    sign = np.where(d > 1e-12 * scale, 1, np.where(d < -1e-12 * scale, -1, 0))
    filled = sign.copy()
    nxt = 0
    for k in range(len(filled) - 1, -1, -1):
        if filled[k] == 0:
            filled[k] = nxt
        else:
            nxt = filled[k]
    last = 0
    for k in range(len(filled)):
        if filled[k] == 0:
            filled[k] = last
        else:
            last = filled[k]
    labels = np.where(filled > 0, "expand", np.where(filled < 0, "shrink", "mixed")).astype(object)
    # collapse short oscillatory runs
    runs = []
    start = 0
    for k in range(1, len(filled) + 1):
        if k == len(filled) or filled[k] != filled[start]:
            runs.append((start, k))
            start = k
    for i in range(1, len(runs) - 1):
        s, e = runs[i]
        if e - s < min_run and filled[runs[i - 1][0]] == filled[runs[i + 1][0]] != filled[s]:
            labels[s:e] = "mixed"
    return labels


def solve_per_regime(problem: TrackingProblem) -> Solution:
    """Solve with tau chosen per step from the reference's local direction."""
    labels = regime_labels(problem.reference, problem.w0)
    p = TrackingProblem(problem.reference, problem.model, problem.bounds, problem.w0, problem.step,
                        problem.lengths, labels)
    return solve(p)


def solve_chain(references, model: ExtrusionModel, bounds=None, w0: float = 0.0, step: float = 0.1,
                lengths=None, per_regime: bool = True) -> list[Solution]:
    """Solve consecutive lines, each starting from the previous line's predicted end width."""
    out = []
    w_prev = w0
    lengths = lengths if lengths is not None else [None] * len(references)
    for ref, ell in zip(references, lengths):
        p = TrackingProblem(ref, model, bounds, max(0.0, w_prev), step, ell)
        sol = solve_per_regime(p) if per_regime else solve(p)
        out.append(sol)
        w_prev = float(sol.w_pred[-1])
    return out

"""Scaffold direction, phrase alignment, probe-layer selection and the
sigmoid response-curve fit.

All vectors are plain sequences or numpy arrays of shape ``(d,)``; lists of
per-subject vectors are stacked into ``(n, d)`` arrays internally.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12

# coarse grid used to seed the local refinement
A_GRID = np.linspace(-12.0, 12.0, 241)
B_GRID = np.linspace(-6.0, 6.0, 121)


class ProbeError(ValueError):
    """Raised when a probe quantity is undefined for the given inputs."""


class ZeroDirectionError(ProbeError):
    pass


class UndefinedAlignmentError(ProbeError):
    pass


class NoDivergenceError(ProbeError):
    pass


class DegenerateFitError(ProbeError):
    pass


@dataclass(frozen=True)
class ScaffoldDirection:
    u: np.ndarray
    raw_norm: float
    layer: int
    n: int
    conditions: tuple[str, str] = ("C1", "C2")

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "n": self.n,
            "raw_norm": self.raw_norm,
            "conditions": list(self.conditions),
            "u": [float(x) for x in self.u],
        }


@dataclass
class AlignmentResult:
    mean_cosine: float
    cosines: np.ndarray
    n_skipped: int = 0


@dataclass
class PhraseProbeResult:
    phrase_id: str
    category: str
    mean_cosine: float
    mean_delta: float
    cosines: list[float] = field(default_factory=list)
    deltas: list[float] = field(default_factory=list)
    n_skipped: int = 0
    text: str = ""


@dataclass(frozen=True)
class LayerSweepResult:
    scores: tuple[float, ...]
    l_star: int
    divergence_layer: int
    tau: float
    at_input: bool = False


@dataclass(frozen=True)
class ResponseCurveFit:
    a: float
    b: float
    mse: float
    n: int
    converged: bool = True
    b_identified: bool = True
    grad_norm: float = 0.0
    iterations: int = 0

    def predict(self, cos):
        return predict_response(self, cos)

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "mse": self.mse,
            "n": self.n,
            "converged": self.converged,
            "b_identified": self.b_identified,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
        }


def _stack(vectors, name: str) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ProbeError(f"{name} must be a non-empty list of equal-length vectors")
    return arr


def scaffold_direction(h_c0, h_c1, layer: int, conditions: tuple[str, str] = ("C1", "C2")) -> ScaffoldDirection:
    """Unit direction ``mean(h_c0) - mean(h_c1)`` over paired subjects.

    The difference is taken first-minus-second. Callers that want the
    direction a preamble writes into the residual stream pass the preamble
    states first.
    """
    a = _stack(h_c0, "h_c0")
    b = _stack(h_c1, "h_c1")
    if a.shape != b.shape:
        raise ProbeError(f"paired hidden states differ in shape: {a.shape} vs {b.shape}")
    diff = a.mean(axis=0) - b.mean(axis=0)
    norm = float(np.linalg.norm(diff))
    if norm < ZERO_NORM:
        raise ZeroDirectionError(f"conditions are indistinguishable at layer {layer} (|d| = {norm:.3g})")
    return ScaffoldDirection(u=diff / norm, raw_norm=norm, layer=layer, n=a.shape[0], conditions=tuple(conditions))


def phrase_alignment(h_p, h_c0, direction: ScaffoldDirection) -> AlignmentResult:
    """Mean cosine between per-subject shifts ``h_p - h_c0`` and ``direction.u``.

    Subjects whose shift is exactly zero are skipped and counted.
    """
    p = _stack(h_p, "h_p")
    base = _stack(h_c0, "h_c0")
    if p.shape != base.shape:
        raise ProbeError(f"paired hidden states differ in shape: {p.shape} vs {base.shape}")
    if p.shape[1] != direction.u.shape[0]:
        raise ProbeError("hidden-state dimension does not match the scaffold direction")
    shifts = p - base
    norms = np.linalg.norm(shifts, axis=1)
    keep = norms >= ZERO_NORM
    n_skipped = int((~keep).sum())
    if not keep.any():
        raise UndefinedAlignmentError("every per-subject shift is zero")
    cosines = (shifts[keep] / norms[keep, None]) @ direction.u
    cosines = np.clip(cosines, -1.0, 1.0)
    return AlignmentResult(mean_cosine=float(cosines.mean()), cosines=cosines, n_skipped=n_skipped)


def select_probe_layer(sweep: Sequence[tuple[float, float]], tau: float = 0.1) -> LayerSweepResult:
    """Pick the layer just before the earliest substantial divergence.

    ``sweep[l]`` holds the logit-lens confidences ``(P_c0, P_c1)`` at layer
    ``l``. The divergence layer is the first ``l`` with
    ``|P_c1 - P_c0| >= tau``; ``l_star`` is the layer before it (0 when the
    divergence is already present at layer 0, flagged via ``at_input``).
    """
    if not len(sweep):
        raise NoDivergenceError("empty layer sweep")
    scores = tuple(float(abs(p1 - p0)) for p0, p1 in sweep)
    for k, s in enumerate(scores):
        if s >= tau:
            return LayerSweepResult(scores=scores, l_star=max(k - 1, 0), divergence_layer=k, tau=tau, at_input=k == 0)
    raise NoDivergenceError(f"no layer reaches divergence tau={tau} (max {max(scores):.3g})")


def _sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def predict_response(fit: ResponseCurveFit, cos):
    """delta_hat(cos) = sigmoid(a*cos + b) - sigmoid(b)."""
    out = _sigmoid(fit.a * np.asarray(cos, dtype=np.float64) + fit.b) - _sigmoid(fit.b)
    return float(out) if np.ndim(out) == 0 else out


def response_mse(a: float, b: float, cos, delta) -> float:
    cos = np.asarray(cos, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    r = _sigmoid(a * cos + b) - _sigmoid(b) - delta
    return float(np.mean(r * r))


def _residuals_and_jac(theta, cos, delta):
    a, b = theta
    s = _sigmoid(a * cos + b)
    s0 = _sigmoid(b)
    r = s - s0 - delta
    ds = s * (1.0 - s)
    ds0 = s0 * (1.0 - s0)
    jac = np.column_stack([ds * cos, ds - ds0])
    return r, jac


def _grid_seed(cos, delta) -> tuple[float, float]:
    a = A_GRID[:, None, None]
    b = B_GRID[None, :, None]
    pred = _sigmoid(a * cos[None, None, :] + b) - _sigmoid(b)
    mse = np.mean((pred - delta[None, None, :]) ** 2, axis=2)
    i, j = np.unravel_index(int(np.argmin(mse)), mse.shape)
    return float(A_GRID[i]), float(B_GRID[j])


def _refine(theta, cos, delta, gtol, max_iter):
    """Levenberg-Marquardt on the mean-squared residual."""
    n = cos.shape[0]
    theta = np.asarray(theta, dtype=np.float64)
    r, jac = _residuals_and_jac(theta, cos, delta)
    cost = float(r @ r) / n
    lam = 1e-3
    grad = 2.0 * jac.T @ r / n
    step_norm = np.inf
    for it in range(1, max_iter + 1):
        if np.linalg.norm(grad) < gtol and step_norm < 1e-10:
            return theta, cost, float(np.linalg.norm(grad)), it - 1, True
        jtj = jac.T @ jac
        jtr = jac.T @ r
        damp = np.diag(np.maximum(np.diag(jtj), 1e-12))
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(jtj + lam * damp, -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = theta + step
            r_new, jac_new = _residuals_and_jac(cand, cos, delta)
            cost_new = float(r_new @ r_new) / n
            if cost_new <= cost:
                theta, r, jac, cost = cand, r_new, jac_new, cost_new
                step_norm = float(np.linalg.norm(step))
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        grad = 2.0 * jac.T @ r / n
        if not accepted:
            # no downhill step at any damping: stationary to machine precision
            gnorm = float(np.linalg.norm(grad))
            return theta, cost, gnorm, it, gnorm < gtol or cost == 0.0
    gnorm = float(np.linalg.norm(grad))
    return theta, cost, gnorm, max_iter, gnorm < gtol


def fit_response_curve(points, gtol: float = 1e-8, max_iter: int = 500) -> ResponseCurveFit:
    """Least-squares fit of ``delta = sigmoid(a*cos + b) - sigmoid(b)``.

    A coarse grid over a in [-12, 12], b in [-6, 6] seeds a
    Levenberg-Marquardt refinement that runs until the gradient norm of the
    mean squared error drops below ``gtol``. Deterministic; no random
    restarts.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateFitError("points must be (cos, delta) pairs")
    if pts.shape[0] < 3:
        raise DegenerateFitError(f"need at least 3 points, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateFitError("points contain non-finite values")
    cos, delta = pts[:, 0], pts[:, 1]
    if np.ptp(cos) == 0.0:
        raise DegenerateFitError("all cos values are identical")
    n = pts.shape[0]

    if np.all(delta == 0.0):
        # a = 0 reproduces the data for every b
        return ResponseCurveFit(a=0.0, b=0.0, mse=0.0, n=n, b_identified=False)

    seed = _grid_seed(cos, delta)
    theta, cost, gnorm, iters, converged = _refine(seed, cos, delta, gtol, max_iter)
    a, b = float(theta[0]), float(theta[1])
    if not converged:
        logger.warning("response-curve fit stopped after %d iterations (|grad| = %.3g)", iters, gnorm)
    return ResponseCurveFit(
        a=a,
        b=b,
        mse=response_mse(a, b, cos, delta),
        n=n,
        converged=converged,
        b_identified=abs(a) > 1e-9,
        grad_norm=gnorm,
        iterations=iters,
    )

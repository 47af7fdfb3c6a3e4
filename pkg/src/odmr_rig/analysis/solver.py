"""Levenberg-Marquardt with column scaling and bound projection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec

logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass
class FitReport:
    model_id: str
    params: dict[str, float]
    uncertainties: dict[str, float]
    rss: float
    iterations: int
    converged: bool
    initial_guess: dict[str, float]
    message: str = ""
    rank_deficient: bool = False
    gradient_norm: float = 0.0
    rss_history: list[float] = field(default_factory=list, repr=False)
    n_points: int = 0

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def to_text(self) -> str:
        lines = [
            f"model: {self.model_id}",
            f"converged: {str(self.converged).lower()}",
            f"iterations: {self.iterations}",
            f"rss: {self.rss!r}",
            f"n_points: {self.n_points}",
            f"rank_deficient: {str(self.rank_deficient).lower()}",
            f"message: {self.message}",
        ]
        for name, value in self.params.items():
            lines.append(f"{name}: {value!r}")
            lines.append(f"{name}_sigma: {self.uncertainties[name]!r}")
        for name, value in self.initial_guess.items():
            lines.append(f"guess_{name}: {value!r}")
        return "\n".join(lines) + "\n"

    def metadata_lines(self) -> list[str]:
        """The report as ``fit.<key>: value`` pairs for a CSV metadata header."""
        return [f"fit.{line}" for line in self.to_text().splitlines()]

    @classmethod
    def from_text(cls, text: str) -> "FitReport":
        kv = {}
        for line in text.splitlines():
            if line.startswith("fit."):
                line = line[4:]
            key, _, value = line.partition(": ")
            kv[key] = value
        params, sig, guess = {}, {}, {}
        fixed = {"model", "converged", "iterations", "rss", "n_points", "rank_deficient", "message"}
        for key, value in kv.items():
            if key in fixed:
                continue
            if key.startswith("guess_"):
                guess[key[6:]] = float(value)
            elif key.endswith("_sigma"):
                sig[key[:-6]] = float(value)
            else:
                params[key] = float(value)
        return cls(kv["model"], params, sig, float(kv["rss"]), int(kv["iterations"]),
                   kv["converged"] == "true", guess, kv["message"], kv["rank_deficient"] == "true",
                   n_points=int(kv["n_points"]))


def nlls_fit(model: ModelSpec, xs, ys, guess, rtol: float = 1e-12, gtol: float = 1e-10,
             xtol: float = 1e-14, max_iter: int = 500, lam0: float = 1e-3) -> FitReport:
    """Damped Gauss-Newton fit of ``model`` to (xs, ys) starting at ``guess``.

    The Jacobian columns are normalized before each step, so parameters that
    differ by twelve orders of magnitude (MHz next to microseconds) are
    handled without manual rescaling. The step solves the augmented system
    [J; sqrt(lambda) I] d = [-r; 0] by least squares rather than forming
    J^T J. Accepted steps never increase the residual.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = model.n_params
    if x.shape != y.shape or x.ndim != 1:
        raise FitError("xs and ys must be 1-D arrays of equal length")
    if len(x) < n + 1:
        raise FitError(f"{model.model_id} needs at least {n + 1} points, got {len(x)}")
    if not np.all(np.isfinite(y)):
        raise FitError("ys contains non-finite values")
    p = np.asarray(guess, dtype=float).copy()
    if p.shape != (n,) or not np.all(np.isfinite(p)):
        raise FitError(f"guess must hold {n} finite values")
    lo, hi = np.array(model.lower), np.array(model.upper)
    if np.any(p < lo) or np.any(p > hi):
        raise FitError(f"initial guess outside bounds: {model.as_dict(p)}")
    guess_used = model.as_dict(p)

    r = model(x, p) - y
    rss = float(r @ r)
    history = [rss]
    lam = lam0
    converged = False
    message = "maximum iterations reached"
    it = 0
    gnorm = math.inf
    for it in range(1, max_iter + 1):
        jac = model.jacobian(x, p)
        scale = np.linalg.norm(jac, axis=0)
        scale[scale == 0] = 1.0
        js = jac / scale
        rnorm = math.sqrt(rss)
        gnorm = float(np.max(np.abs(js.T @ r))) / rnorm if rnorm > 0 else 0.0
        if gnorm < gtol:
            converged, message = True, "gradient below tolerance"
            break
        accepted = False
        while lam < 1e16:
            aug = np.vstack([js, math.sqrt(lam) * np.eye(n)])
            rhs = np.concatenate([-r, np.zeros(n)])
            step = np.linalg.lstsq(aug, rhs, rcond=None)[0] / scale
            trial = model.project(p + step)
            r_trial = model(x, trial) - y
            rss_trial = float(r_trial @ r_trial)
            if np.isfinite(rss_trial) and rss_trial <= rss:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            converged = gnorm < math.sqrt(gtol) or rss <= 1e-30
            message = "no descent step found" + (" at a stationary point" if converged else "")
            break
        dx = np.abs(trial - p)
        drop = rss - rss_trial
        p, r, rss = trial, r_trial, rss_trial
        history.append(rss)
        lam = max(lam / 3.0, 1e-12)
        if drop <= rtol * max(rss, 1e-300) or rss <= 1e-30:
            converged, message = True, "relative residual change below tolerance"
            break
        if np.all(dx <= xtol * (np.abs(p) + xtol)):
            converged, message = True, "parameter step below tolerance"
            break

    jac = model.jacobian(x, p)
    sigmas, deficient = _uncertainties(jac, rss, len(x))
    if not converged:
        logger.info("%s fit did not converge: %s", model.model_id, message)
    return FitReport(model.model_id, model.as_dict(p), model.as_dict(sigmas), rss, it, converged, guess_used,
                     message, deficient, gnorm, history, len(x))


def _uncertainties(jac: np.ndarray, rss: float, m: int) -> tuple[np.ndarray, bool]:
    n = jac.shape[1]
    scale = np.linalg.norm(jac, axis=0)
    zero = scale == 0
    scale[zero] = 1.0
    u, s, vt = np.linalg.svd(jac / scale, full_matrices=False)
    cutoff = s.max() * max(m, n) * np.finfo(float).eps if s.size else 0.0
    deficient = bool(np.any(s <= cutoff) or np.any(zero))
    dof = max(m - n, 1)
    var = rss / dof
    inv_s2 = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0) ** 2, math.inf)
    with np.errstate(invalid="ignore"):
        diag = np.sum(vt.T ** 2 * inv_s2, axis=1)
    diag = np.where(np.isnan(diag), math.inf, diag)
    sig = np.sqrt(var * diag) / scale
    sig[zero] = math.inf
    sig = np.where(np.isnan(sig), math.inf, sig)
    return sig, deficient

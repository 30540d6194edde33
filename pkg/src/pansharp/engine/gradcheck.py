"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ContractViolation, PansharpError
from .tensor import Tape, Tensor


class GradCheckError(PansharpError, RuntimeError):
    """The checked function raised while being perturbed."""


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: np.ndarray
    excluded: np.ndarray
    passed_elements: np.ndarray
    tolerance: float
    unresolved: np.ndarray | None = None

    @property
    def max_relative_error(self) -> float:
        considered = self.relative_error[~self.excluded]
        return float(considered.max()) if considered.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        unresolved = 0 if self.unresolved is None else int(self.unresolved.sum())
        return (f"{verdict} max_rel_err={self.max_relative_error:.3e} tol={self.tolerance:.1e} "
                f"elements={self.analytic.size} excluded={self.n_excluded} unresolved={unresolved}")


def _scalar(fn, x: Tensor) -> float:
    out = fn(x)
    if out.shape != (1, 1, 1, 1):
        raise ContractViolation(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return out.item()


def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-4,
               tolerance: float = 1e-3, kink_tol: float = 1e-2, elements: int | None = None,
               seed: int = 0, noise_ulps: float = 64.0) -> GradCheckReport:
    """Compare tape gradients of ``function`` at ``point`` with central differences.

    The relative error of each element is ``|a - n| / max(|a|, |n|, 1e-12)``.
    Elements where the forward and backward one-sided differences disagree
    by more than ``kink_tol`` (relative) are re-probed at half the step: a
    smooth function's gap quarters with the step (second-order term), while a
    kink (ReLU) keeps a gap of similar size and a jump (step-mask flip)
    between the two steps makes it vanish. Such elements are
    flagged in ``excluded`` and left out of the verdict, as are elements whose
    absolute disagreement is below ``noise_ulps`` ulps of f per unit step
    (reported in ``unresolved``). With ``elements`` only that many randomly chosen
    entries are perturbed; the others are reported as excluded.
    """
    if step <= 0:
        raise ContractViolation("grad_check step must be positive")
    point = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    if point.ndim != 4:
        raise ContractViolation("grad_check point must be 4-D")

    tape = Tape()
    x = tape.variable(point)
    out = function(x)
    if out.shape != (1, 1, 1, 1):
        raise ContractViolation(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    f0 = out.item()
    if out.tracked:
        tape.backward(out)
        analytic = x.grad
    else:
        analytic = np.zeros_like(point)

    numeric = analytic.astype(np.float64, copy=True)
    excluded = np.zeros(point.shape, dtype=bool)
    work = point.copy()
    indices = list(np.ndindex(point.shape))
    if elements is not None and elements < len(indices):
        pick = np.random.default_rng(seed).choice(len(indices), size=elements, replace=False)
        excluded[:] = True
        indices = [indices[i] for i in np.sort(pick)]
        for idx in indices:
            excluded[idx] = False
    for idx in indices:
        orig = work[idx]
        try:
            work[idx] = orig + step
            fp = _scalar(function, Tensor(work))
            work[idx] = orig - step
            fm = _scalar(function, Tensor(work))
        except Exception as exc:
            raise GradCheckError(f"function raised at element {idx}: {exc}") from exc
        finally:
            work[idx] = orig
        numeric[idx] = (fp - fm) / (2 * step)
        gap = (fp - f0) - (f0 - fm)
        scale = max(abs(fp - f0), abs(f0 - fm), 1e-12 * step)
        if abs(gap) > kink_tol * scale and abs(gap) > 1e-7 * step:
            try:
                work[idx] = orig + step / 2
                fph = _scalar(function, Tensor(work))
                work[idx] = orig - step / 2
                fmh = _scalar(function, Tensor(work))
            except Exception as exc:
                raise GradCheckError(f"function raised at element {idx}: {exc}") from exc
            finally:
                work[idx] = orig
            # curvature quarters the gap; a kink keeps it, a jump beyond step/2 removes it
            ratio = ((fph - f0) - (f0 - fmh)) / gap
            excluded[idx] = not 0.125 <= ratio <= 0.375

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom

    # Rounding in f (a few dozen ulps for losses summed over many pixels)
    # becomes noise of size ulps/step in the difference quotient. Elements whose
    # disagreement stays inside that floor cannot be judged either way.
    noise = noise_ulps * np.spacing(max(abs(f0), np.finfo(np.float64).tiny)) / step
    unresolved = (rel > tolerance) & ~excluded & (np.abs(analytic - numeric) <= noise)
    excluded |= unresolved
    return GradCheckReport(analytic=analytic, numeric=numeric, relative_error=rel, excluded=excluded,
                           passed_elements=(rel <= tolerance) | excluded, tolerance=tolerance,
                           unresolved=unresolved)

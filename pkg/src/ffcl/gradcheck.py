"""Central finite-difference gradient checking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad, record_kinks


@dataclass
class GradReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    passed: bool = True
    elapsed: float = 0.0
    probes: int = 0
    skipped: int = 0
    failure: str | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.abs(analytic)
    f = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, f), 1e-8)


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    tol: float = 1e-3,
    probes: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare analytic gradients of ``loss_fn()`` w.r.t. ``params`` with central differences.

    ``loss_fn`` takes no arguments and reads the parameter tensors directly, so
    perturbing ``param.data`` in place changes its output. With ``probes`` set,
    only that many randomly chosen coordinates per parameter are perturbed.
    A probe whose +/-eps evaluations switch any ReLU or clamp to the other side
    of its kink is not differentiable there and is skipped (counted in
    ``skipped``).
    """
    start = time.perf_counter()
    report = GradReport()
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with record_kinks() as base_kinks:
        root = loss_fn()
    if not np.isfinite(root.data).all():
        report.passed = False
        report.failure = "non-finite loss at the unperturbed point"
        report.elapsed = time.perf_counter() - start
        return report
    root.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if probes is None or probes >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, size=probes, replace=False))
            numeric = np.full(coords.size, np.nan)
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                with record_kinks() as up_kinks:
                    up = float(loss_fn().data)
                flat[i] = orig - eps
                with record_kinks() as down_kinks:
                    down = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    report.passed = False
                    report.failure = f"non-finite output when perturbing {name}[{np.unravel_index(i, p.shape)}]"
                    report.elapsed = time.perf_counter() - start
                    return report
                if not (_same_pattern(base_kinks, up_kinks) and _same_pattern(base_kinks, down_kinks)):
                    report.skipped += 1
                    continue
                numeric[k] = (up - down) / (2 * eps)
            valid = ~np.isnan(numeric)
            coords, numeric = coords[valid], numeric[valid]
            err = relative_error(analytic[name].reshape(-1)[coords].astype(np.float64), numeric)
            report.max_rel_error[name] = float(err.max()) if err.size else 0.0
            report.probes += int(coords.size)
            if err.size and err.max() > tol and report.failure is None:
                worst = coords[int(err.argmax())]
                report.failure = (
                    f"{name}[{np.unravel_index(worst, p.shape)}]: relative error {err.max():.3e} > {tol:g}"
                )
    report.passed = report.failure is None
    report.elapsed = time.perf_counter() - start
    return report


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    tol: float = 1e-3,
    probes: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Check ``f(x)`` (tensor -> scalar) against central differences in ``x``."""
    return check_params(lambda: f(x), {"x": x}, eps=eps, tol=tol, probes=probes, seed=seed)

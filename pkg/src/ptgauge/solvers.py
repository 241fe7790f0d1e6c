"""Anderson-accelerated fixed-point iteration for the implicit stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

RIDGE = 1e-12
MAX_GRAM_COND = 1e12
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class AndersonConfig:
    """Anderson mixing parameters.

    Attributes:
        step_length: damping ``alpha`` applied to the residual, in ``(0, 1]``.
        mixing_dim: number of stored iterates; ``m`` iterates give ``m - 1``
            difference columns, so ``mixing_dim = 1`` is plain damped
            iteration.
        tol: 2-norm tolerance on ``F(x) - x``.
        max_iter: maximum number of map evaluations.
    """

    step_length: float = 1.0
    mixing_dim: int = 20
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if not 0.0 < self.step_length <= 1.0:
            raise ValueError("step_length must lie in (0, 1]")
        if self.mixing_dim < 1:
            raise ValueError("mixing_dim must be >= 1")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool


def _as_real(x: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(x).reshape(-1)
    return flat.view(np.float64) if np.iscomplexobj(flat) else flat.astype(np.float64)


def anderson_solve(
    fmap: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    cfg: AndersonConfig,
    precondition: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[np.ndarray, SolveReport]:
    """Solve ``x = fmap(x)`` by Anderson mixing (type II).

    Each iteration evaluates the residual ``f_k = fmap(x_k) - x_k`` and, once
    two or more iterates are stored, minimizes ``||f_k - dF gamma||`` over
    the stored residual differences ``dF`` (ridge-regularized normal
    equations; the oldest column is dropped when the Gram matrix is
    ill-conditioned). The update is

        x_{k+1} = x_k + alpha f_k - (dX + alpha dF) gamma.

    Returns the last iterate whose residual met ``cfg.tol`` together with a
    :class:`SolveReport`; if ``max_iter`` is reached the final iterate is
    returned with ``converged=False``.
    """
    x = np.array(x0, copy=True)
    shape, cplx = x.shape, np.iscomplexobj(x)
    alpha = cfg.step_length
    nhist = cfg.mixing_dim - 1
    dxs: list[np.ndarray] = []
    dfs: list[np.ndarray] = []
    dgs: list[np.ndarray] = []
    prev_x = prev_f = prev_g = None
    res = np.inf

    for it in range(1, cfg.max_iter + 1):
        fx = np.asarray(fmap(x))
        if fx.shape != shape:
            raise ValueError(f"fixed-point map changed shape {shape} -> {fx.shape}")
        f = fx - x
        xr, fr = _as_real(x), _as_real(f)
        res = float(np.sqrt(fr @ fr))
        if not np.isfinite(res):
            return x, SolveReport(it, res, False)
        if res <= cfg.tol:
            return x, SolveReport(it, res, True)
        if it == cfg.max_iter:
            break

        gr = _as_real(np.asarray(precondition(f), dtype=f.dtype)) if precondition is not None else fr
        if nhist > 0 and prev_x is not None:
            dxs.append(xr - prev_x)
            dfs.append(fr - prev_f)
            dgs.append(gr - prev_g)
            if len(dxs) > nhist:
                del dxs[0], dfs[0], dgs[0]
        prev_x, prev_f, prev_g = xr.copy(), fr.copy(), gr.copy()

        step = alpha * gr
        while dfs:
            dF = np.array(dfs)
            gram = dF @ dF.T
            k = len(dfs)
            scale = max(float(np.max(np.diag(gram))), _TINY)
            gram.flat[:: k + 1] += RIDGE * scale
            if k > 1:
                ev = np.linalg.eigvalsh(gram)
                if ev[-1] > MAX_GRAM_COND * ev[0]:
                    del dxs[0], dfs[0], dgs[0]
                    continue
            gamma = np.linalg.solve(gram, dF @ fr)
            step = step - (np.array(dxs) + alpha * np.array(dgs)).T @ gamma
            break

        x = _from_real(xr + step, shape, cplx)

    return x, SolveReport(cfg.max_iter, res, False)


def _from_real(r: np.ndarray, shape, cplx: bool) -> np.ndarray:
    if cplx:
        return r.view(np.complex128).reshape(shape).copy()
    return r.reshape(shape).copy()


def fixed_point_iterate(fmap, x0, tol: float, max_iter: int) -> tuple[np.ndarray, SolveReport]:
    """Plain iteration ``x <- fmap(x)``; reference point for Anderson comparisons."""
    x = np.array(x0, copy=True)
    res = np.inf
    for it in range(1, max_iter + 1):
        fx = fmap(x)
        res = float(np.linalg.norm(fx - x))
        if res <= tol:
            return x, SolveReport(it, res, True)
        x = fx
    return x, SolveReport(max_iter, res, False)

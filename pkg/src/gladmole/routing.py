"""Global and local expert routers plus per-frame dynamic fusion.

A router holds three bias-free projections:

* ``w_global`` (d_h x N) maps the raw input features to a global expert
  distribution.  Inside an encoder a single matrix is shared by every layer,
  so a layer-level router may leave it as ``None``.
* ``w_local`` (d x N) maps the layer's own input to a local distribution.
* ``w_fusion`` (d x 2) produces per-frame weights ``[global, local]`` used to
  mix the two distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError, ShapeError
from .tensor import matmul, softmax_rows, softmax_rows_backward

FUSION_MODES = ("dynamic", "static_sum", "local_only")


@dataclass(frozen=True)
class RouterParams:
    w_local: np.ndarray
    w_fusion: np.ndarray
    w_global: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.w_local.ndim != 2 or self.w_fusion.ndim != 2:
            raise ShapeError("router weights must be 2-D")
        if self.w_local.shape[1] < 1:
            raise ShapeError("router needs at least one expert")
        if self.w_fusion.shape[1] != 2:
            raise ShapeError(f"w_fusion must have 2 columns, got {self.w_fusion.shape}")
        if self.w_fusion.shape[0] != self.w_local.shape[0]:
            raise ShapeError(
                f"w_local {self.w_local.shape} and w_fusion {self.w_fusion.shape} disagree on rows"
            )
        if self.w_global is not None:
            if self.w_global.ndim != 2 or self.w_global.shape[1] != self.w_local.shape[1]:
                raise ShapeError(
                    f"w_global {self.w_global.shape} and w_local {self.w_local.shape} "
                    "disagree on expert count"
                )

    @property
    def num_experts(self) -> int:
        return self.w_local.shape[1]

    @property
    def d_in(self) -> int:
        return self.w_local.shape[0]


def init_router(rng: np.random.Generator, d_in: int, num_experts: int,
                d_global: Optional[int] = None) -> RouterParams:
    """Draw router weights from U(-1/sqrt(d), 1/sqrt(d)).

    ``d_global`` sets the row count of an owned global router; leave it
    ``None`` when the global router lives elsewhere (encoder-level).
    """
    bound = 1.0 / np.sqrt(d_in)
    w_local = rng.uniform(-bound, bound, size=(d_in, num_experts))
    w_fusion = rng.uniform(-bound, bound, size=(d_in, 2))
    w_global = None
    if d_global is not None:
        gb = 1.0 / np.sqrt(d_global)
        w_global = rng.uniform(-gb, gb, size=(d_global, num_experts))
    return RouterParams(w_local=w_local, w_fusion=w_fusion, w_global=w_global)


def _route(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # leading batch axes broadcast (used by batched finite differences)
    if x.ndim < 2 or x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"features {x.shape} do not match router weight {w.shape}")
    if x.ndim == 2 and w.ndim == 2:
        return softmax_rows(matmul(x, w))
    return softmax_rows(x @ w)


def global_route(x_s: np.ndarray, params: RouterParams) -> np.ndarray:
    """Expert distribution (T x N) computed from the raw features."""
    if params.w_global is None:
        raise InvalidInputError("router has no global weight matrix")
    return _route(x_s, params.w_global)


def local_route(x_in: np.ndarray, params: RouterParams) -> np.ndarray:
    """Expert distribution (T x N) computed from the layer input."""
    return _route(x_in, params.w_local)


def fusion_weights(x_in: np.ndarray, params: RouterParams) -> np.ndarray:
    """Per-frame ``[global share, local share]`` weights, shape T x 2."""
    return _route(x_in, params.w_fusion)


def _check_pair(p_global: np.ndarray, p_local: np.ndarray) -> None:
    if p_global.shape != p_local.shape:
        raise ShapeError(f"global {p_global.shape} and local {p_local.shape} distributions differ")


def fuse(p_global: np.ndarray, p_local: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Frame-wise convex combination of the two distributions."""
    _check_pair(p_global, p_local)
    if alpha.ndim != 2 or alpha.shape != (p_global.shape[0], 2):
        raise ShapeError(f"fusion weights {alpha.shape} do not match {p_global.shape[0]} frames")
    return alpha[:, 0:1] * p_global + alpha[:, 1:2] * p_local


def fuse_backward(p_global, p_local, alpha, grad):
    """Gradients of :func:`fuse` w.r.t. ``(p_global, p_local, alpha)``."""
    d_global = alpha[:, 0:1] * grad
    d_local = alpha[:, 1:2] * grad
    d_alpha = np.stack([np.sum(grad * p_global, axis=1), np.sum(grad * p_local, axis=1)], axis=1)
    return d_global, d_local, d_alpha


def static_fuse(p_global: np.ndarray, p_local: np.ndarray) -> np.ndarray:
    """Plain sum of the two distributions.

    Rows sum to 2; the result is intentionally left unnormalised.
    """
    _check_pair(p_global, p_local)
    return p_global + p_local


def combine(x_in: np.ndarray, p_global: Optional[np.ndarray], params: RouterParams,
            mode: str = "dynamic"):
    """Produce the expert weights a MoLE layer consumes under ``mode``.

    Returns ``(p, cache)``; ``cache`` feeds :func:`combine_backward`.
    """
    if mode not in FUSION_MODES:
        raise InvalidInputError(f"unknown fusion mode {mode!r}")
    p_local = local_route(x_in, params)
    cache = {"mode": mode, "x": x_in, "p_global": p_global, "p_local": p_local}
    if mode == "local_only":
        return p_local, cache
    if p_global is None:
        raise InvalidInputError(f"fusion mode {mode!r} needs a global distribution")
    if p_global.shape[-2:] != p_local.shape[-2:]:
        raise ShapeError(f"global distribution {p_global.shape[-2:]} does not match "
                         f"local distribution {p_local.shape[-2:]}")
    if mode == "static_sum":
        return p_global + p_local, cache
    alpha = fusion_weights(x_in, params)
    cache["alpha"] = alpha
    return alpha[..., 0:1] * p_global + alpha[..., 1:2] * p_local, cache


def combine_backward(cache: dict, params: RouterParams, grad_p: np.ndarray):
    """Backpropagate through :func:`combine`.

    Returns ``(d_x, d_p_global, grads)`` where ``grads`` holds ``w_local`` and
    ``w_fusion`` gradients and ``d_p_global`` is ``None`` in local-only mode.
    """
    mode = cache["mode"]
    x = cache["x"]
    p_local = cache["p_local"]
    d_p_global = None
    d_w_fusion = np.zeros_like(params.w_fusion)
    d_x = np.zeros_like(x)
    if mode == "local_only":
        d_p_local = grad_p
    elif mode == "static_sum":
        d_p_local = grad_p
        d_p_global = grad_p
    else:
        alpha = cache["alpha"]
        d_p_global, d_p_local, d_alpha = fuse_backward(cache["p_global"], p_local, alpha, grad_p)
        d_logit_f = softmax_rows_backward(alpha, d_alpha)
        d_w_fusion = x.T @ d_logit_f
        d_x += d_logit_f @ params.w_fusion.T
    d_logit_l = softmax_rows_backward(p_local, d_p_local)
    d_x += d_logit_l @ params.w_local.T
    grads = {"w_local": x.T @ d_logit_l, "w_fusion": d_w_fusion}
    return d_x, d_p_global, grads

"""Mixture-of-LoRA-experts linear layer.

Per frame ``t`` the layer computes::

    y_t = W x_t + (scale / rank) * sum_i P[t, i] * B_i A_i x_t + b

where ``W``/``b`` is the shared dense transform and each expert ``i`` is a
rank-``r`` product ``B_i A_i``.  The forward pass is batched over frames:
inputs are ``T x d_in`` and expert weights ``T x N``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import InvalidInputError, ShapeError
from .routing import RouterParams, init_router
from .tensor import matrix_from_json, matrix_to_json


@dataclass(frozen=True)
class LoraExpert:
    a: np.ndarray  # rank x d_in
    b: np.ndarray  # d_out x rank

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("LoRA factors must be 2-D")
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"A {self.a.shape} and B {self.b.shape} disagree on rank")
        if self.rank < 1:
            raise ShapeError("LoRA rank must be at least 1")
        if self.rank >= min(self.d_in, self.d_out):
            raise ShapeError(
                f"rank {self.rank} must be below min(d_in, d_out) = {min(self.d_in, self.d_out)}"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[-2]

    @property
    def d_in(self) -> int:
        return self.a.shape[-1]

    @property
    def d_out(self) -> int:
        return self.b.shape[-2]


@dataclass(frozen=True)
class MoleLayerParams:
    w_shared: np.ndarray  # d_out x d_in
    bias: np.ndarray  # d_out
    experts: List[LoraExpert]
    lora_scale: float
    router: Optional[RouterParams] = None

    def __post_init__(self):
        d_out, d_in = self.w_shared.shape
        if self.bias.shape != (d_out,):
            raise ShapeError(f"bias {self.bias.shape} does not match output width {d_out}")
        if not self.experts:
            raise InvalidInputError("a MoLE layer needs at least one expert")
        ranks = {e.rank for e in self.experts}
        dims = {(e.d_in, e.d_out) for e in self.experts}
        if len(ranks) != 1 or dims != {(d_in, d_out)}:
            raise ShapeError("all experts must share (d_in, d_out, rank) with the shared layer")
        if not self.lora_scale > 0:
            raise InvalidInputError(f"lora_scale must be positive, got {self.lora_scale}")
        if self.router is not None:
            if self.router.num_experts != len(self.experts):
                raise ShapeError(
                    f"router has {self.router.num_experts} outputs for {len(self.experts)} experts"
                )
            if self.router.d_in != d_in:
                raise ShapeError(f"router expects width {self.router.d_in}, layer input is {d_in}")

    @property
    def d_in(self) -> int:
        return self.w_shared.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_shared.shape[0]

    @property
    def rank(self) -> int:
        return self.experts[0].rank

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def multiplier(self) -> float:
        """Effective LoRA multiplier ``lora_scale / rank``."""
        return self.lora_scale / self.rank


def init_mole_layer(rng: np.random.Generator, d_in: int, d_out: int, num_experts: int,
                    rank: int, lora_scale: float, *, d_global: Optional[int] = None,
                    with_router: bool = True) -> MoleLayerParams:
    """Initialise a layer: uniform shared weights, uniform A_i, zero B_i.

    With every B_i zero an untrained layer reproduces its shared linear map.
    """
    if num_experts < 1:
        raise InvalidInputError("num_experts must be at least 1")
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_out, d_in))
    b = rng.uniform(-bound, bound, size=d_out)
    experts = [
        LoraExpert(a=rng.uniform(-bound, bound, size=(rank, d_in)), b=np.zeros((d_out, rank)))
        for _ in range(num_experts)
    ]
    router = init_router(rng, d_in, num_experts, d_global) if with_router else None
    return MoleLayerParams(w_shared=w, bias=b, experts=experts, lora_scale=lora_scale, router=router)


def lora_apply(expert: LoraExpert, x: np.ndarray) -> np.ndarray:
    """Unscaled low-rank path ``B A x`` for every frame of ``x`` (T x d_in)."""
    if x.ndim < 2 or x.shape[-1] != expert.d_in:
        raise ShapeError(f"input {x.shape} does not match expert input width {expert.d_in}")
    return (x @ np.swapaxes(expert.a, -1, -2)) @ np.swapaxes(expert.b, -1, -2)


def _check_inputs(params: MoleLayerParams, x_in: np.ndarray, p: np.ndarray) -> None:
    if x_in.ndim != 2 or x_in.shape[1] != params.d_in:
        raise ShapeError(f"input {x_in.shape} does not match layer input width {params.d_in}")
    if p.ndim != 2 or p.shape[0] != x_in.shape[0]:
        raise ShapeError(f"expert weights {p.shape} do not match {x_in.shape[0]} frames")
    if p.shape[1] != params.num_experts:
        raise ShapeError(
            f"expert weights have {p.shape[1]} columns for {params.num_experts} experts"
        )
    if (p < 0).any():
        raise InvalidInputError("expert weights must be nonnegative")


def mole_forward(params: MoleLayerParams, x_in: np.ndarray, p: np.ndarray) -> np.ndarray:
    _check_inputs(params, x_in, p)
    return mole_apply(params, x_in, p)


def mole_apply(params: MoleLayerParams, x_in: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Unchecked forward kernel.

    Any operand may carry extra leading batch axes; they broadcast.
    """
    y = x_in @ np.swapaxes(params.w_shared, -1, -2) + params.bias[..., None, :]
    s = params.multiplier
    for i, expert in enumerate(params.experts):
        y = y + s * p[..., i:i + 1] * lora_apply(expert, x_in)
    return y


@dataclass
class MoleGrads:
    w_shared: np.ndarray
    bias: np.ndarray
    a: List[np.ndarray]
    b: List[np.ndarray]
    x_in: np.ndarray
    p: np.ndarray


def mole_backward(params: MoleLayerParams, x_in: np.ndarray, p: np.ndarray,
                  upstream_grad: np.ndarray) -> MoleGrads:
    """Analytic gradients of ``sum(upstream_grad * mole_forward(...))``."""
    _check_inputs(params, x_in, p)
    g = upstream_grad
    if g.shape != (x_in.shape[0], params.d_out):
        raise ShapeError(f"upstream gradient {g.shape} does not match output "
                         f"{(x_in.shape[0], params.d_out)}")
    s = params.multiplier
    d_x = g @ params.w_shared
    d_p = np.empty_like(p)
    d_a, d_b = [], []
    for i, e in enumerate(params.experts):
        u = x_in @ e.a.T  # T x r
        v = u @ e.b.T  # T x d_out
        d_p[:, i] = s * np.sum(g * v, axis=1)
        g_i = s * p[:, i:i + 1] * g
        d_b.append(g_i.T @ u)
        d_u = g_i @ e.b
        d_a.append(d_u.T @ x_in)
        d_x = d_x + d_u @ e.a
    return MoleGrads(w_shared=g.T @ x_in, bias=g.sum(axis=0), a=d_a, b=d_b, x_in=d_x, p=d_p)


def param_count_formula(d_in: int, d_out: int, num_experts: int, rank: int,
                        d_router: int, include_global_router: bool = False) -> int:
    """Closed-form parameter count of one layer plus its routers."""
    shared = d_out * d_in + d_out
    lora = num_experts * rank * (d_in + d_out)
    routers = d_router * num_experts + 2 * d_router
    if include_global_router:
        routers += d_router * num_experts
    return shared + lora + routers


def count_params(params: MoleLayerParams, include_global_router: bool = False) -> int:
    d_router = params.router.d_in if params.router is not None else params.d_in
    return param_count_formula(params.d_in, params.d_out, params.num_experts, params.rank,
                               d_router, include_global_router)


# JSON layout:
# {"d_in", "d_out", "rank", "num_experts", "lora_scale",
#  "w_shared": {"shape", "data"}, "bias": {...},
#  "experts": [{"a": {...}, "b": {...}}, ...],
#  "router": {"w_local": {...}, "w_fusion": {...}, "w_global": {...} | null} | null}
# Values are row-major float arrays.

def layer_to_json(params: MoleLayerParams) -> dict:
    router = None if params.router is None else router_to_json(params.router)
    return {
        "d_in": params.d_in,
        "d_out": params.d_out,
        "rank": params.rank,
        "num_experts": params.num_experts,
        "lora_scale": params.lora_scale,
        "w_shared": matrix_to_json(params.w_shared),
        "bias": matrix_to_json(params.bias),
        "experts": [{"a": matrix_to_json(e.a), "b": matrix_to_json(e.b)} for e in params.experts],
        "router": router,
    }


def router_from_json(obj: dict) -> RouterParams:
    try:
        wg = obj.get("w_global")
        return RouterParams(
            w_local=matrix_from_json(obj["w_local"], "w_local"),
            w_fusion=matrix_from_json(obj["w_fusion"], "w_fusion"),
            w_global=None if wg is None else matrix_from_json(wg, "w_global"),
        )
    except KeyError as exc:
        raise InvalidInputError(f"router JSON lacks {exc}") from None


def router_to_json(router: RouterParams) -> dict:
    return {
        "w_local": matrix_to_json(router.w_local),
        "w_fusion": matrix_to_json(router.w_fusion),
        "w_global": None if router.w_global is None else matrix_to_json(router.w_global),
    }


def layer_from_json(obj: dict) -> MoleLayerParams:
    try:
        experts = [
            LoraExpert(a=matrix_from_json(e["a"], "A"), b=matrix_from_json(e["b"], "B"))
            for e in obj["experts"]
        ]
        router = obj.get("router")
        return MoleLayerParams(
            w_shared=matrix_from_json(obj["w_shared"], "w_shared"),
            bias=matrix_from_json(obj["bias"], "bias"),
            experts=experts,
            lora_scale=float(obj["lora_scale"]),
            router=None if router is None else router_from_json(router),
        )
    except KeyError as exc:
        raise InvalidInputError(f"layer JSON lacks {exc}") from None


def dumps_layer(params: MoleLayerParams) -> str:
    return json.dumps(layer_to_json(params), indent=1)


def loads_layer(text: str) -> MoleLayerParams:
    return layer_from_json(json.loads(text))

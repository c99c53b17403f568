"""A small pre-norm transformer encoder with optional MoLE slots.

Each block has six linear slots, the attention projections ``q, k, v, o``
and the feed-forward pair ``ffn1, ffn2``.  ``placement`` selects which of
them become MoLE layers.  The global router is owned by the encoder: its
distribution is computed once from the raw input and handed to every MoLE
slot, while each slot routes locally on its own input.

Block layout (no convolution module, no subsampling)::

    h   = x + O(attention(Q(LN1(x)), K(LN1(x)), V(LN1(x))))
    out = h + FFN2(swish(FFN1(LN2(h))))
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import ConfigError, InvalidInputError, ShapeError
from .mole import MoleLayerParams, init_mole_layer, mole_apply, mole_backward, param_count_formula
from .routing import FUSION_MODES, combine, combine_backward, softmax_rows
from .tensor import central_diff_batched, make_rng, relative_error, softmax_rows_backward

PLACEMENTS = ("none", "ffn_only", "attention_only", "both")
ATTENTION_SLOTS = ("q", "k", "v", "o")
FFN_SLOTS = ("ffn1", "ffn2")
SLOTS = ATTENTION_SLOTS + FFN_SLOTS
LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 1
    d_h: int = 16
    num_heads: int = 2
    d_ffn: int = 32
    num_experts: int = 3
    lora_rank: int = 2
    lora_scale: float = 2.0
    placement: str = "both"
    fusion_mode: str = "dynamic"

    def __post_init__(self):
        for name in ("num_blocks", "d_h", "num_heads", "d_ffn"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_h % self.num_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by num_heads={self.num_heads}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.placement != "none":
            if not isinstance(self.num_experts, int) or self.num_experts < 1:
                raise ConfigError(f"num_experts must be >= 1, got {self.num_experts!r}")
            if not isinstance(self.lora_rank, int) or not 1 <= self.lora_rank < min(self.d_h, self.d_ffn):
                raise ConfigError(
                    f"lora_rank must lie in [1, {min(self.d_h, self.d_ffn)}), got {self.lora_rank!r}"
                )
            if not self.lora_scale > 0:
                raise ConfigError(f"lora_scale must be positive, got {self.lora_scale!r}")

    def mole_slots(self) -> tuple:
        return {
            "none": (),
            "ffn_only": FFN_SLOTS,
            "attention_only": ATTENTION_SLOTS,
            "both": SLOTS,
        }[self.placement]

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        if not isinstance(obj, dict):
            raise ConfigError("encoder config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)


#: Reference encoder: 12 blocks, 4 heads, 256 units, 1024-wide FFN, 3 experts,
#: LoRA rank 8 with scale 8, MoLE in every linear layer.
REFERENCE_CONFIG = EncoderConfig(num_blocks=12, d_h=256, num_heads=4, d_ffn=1024, num_experts=3,
                             lora_rank=8, lora_scale=8.0, placement="both", fusion_mode="dynamic")


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray  # d_out x d_in
    bias: np.ndarray


Slot = Union[Linear, MoleLayerParams]


@dataclass(frozen=True)
class LayerNorm:
    gain: np.ndarray
    offset: np.ndarray


@dataclass(frozen=True)
class Block:
    ln1: LayerNorm
    ln2: LayerNorm
    slots: Dict[str, Slot]


@dataclass(frozen=True)
class EncoderState:
    config: EncoderConfig
    blocks: List[Block]
    w_global: Optional[np.ndarray] = None


def _slot_dims(config: EncoderConfig, slot: str):
    if slot == "ffn1":
        return config.d_h, config.d_ffn
    if slot == "ffn2":
        return config.d_ffn, config.d_h
    return config.d_h, config.d_h


def build_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderState:
    """Initialise an encoder deterministically from ``rng``.

    Shared weights and expert/router weights come from two separate streams
    (the second seeded from the first draw of ``rng``), so encoders built
    with the same seed share identical plain weights regardless of
    placement.
    """
    expert_rng = make_rng(int(rng.integers(0, 2**63)))
    moles = set(config.mole_slots())
    blocks = []
    for _ in range(config.num_blocks):
        slots = {}
        for name in SLOTS:
            d_in, d_out = _slot_dims(config, name)
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
            b = rng.uniform(-bound, bound, size=d_out)
            if name in moles:
                layer = init_mole_layer(expert_rng, d_in, d_out, config.num_experts,
                                        config.lora_rank, config.lora_scale)
                slots[name] = MoleLayerParams(w_shared=w, bias=b, experts=layer.experts,
                                              lora_scale=layer.lora_scale, router=layer.router)
            else:
                slots[name] = Linear(weight=w, bias=b)
        ln = lambda: LayerNorm(gain=np.ones(config.d_h), offset=np.zeros(config.d_h))  # noqa: E731
        blocks.append(Block(ln1=ln(), ln2=ln(), slots=slots))
    w_global = None
    if moles:
        bound = 1.0 / np.sqrt(config.d_h)
        w_global = expert_rng.uniform(-bound, bound, size=(config.d_h, config.num_experts))
    return EncoderState(config=config, blocks=blocks, w_global=w_global)


# --------------------------------------------------------------------------
# parameter access


def named_parameters(state: EncoderState) -> Dict[str, np.ndarray]:
    """Every trainable array keyed by a dotted path, in a fixed order.

    The arrays are the live storage of ``state``; mutating them mutates the
    encoder.
    """
    params: Dict[str, np.ndarray] = {}
    for bi, block in enumerate(state.blocks):
        pre = f"blocks.{bi}"
        params[f"{pre}.ln1.gain"] = block.ln1.gain
        params[f"{pre}.ln1.offset"] = block.ln1.offset
        params[f"{pre}.ln2.gain"] = block.ln2.gain
        params[f"{pre}.ln2.offset"] = block.ln2.offset
        for name in SLOTS:
            slot = block.slots[name]
            sp = f"{pre}.{name}"
            if isinstance(slot, Linear):
                params[f"{sp}.weight"] = slot.weight
                params[f"{sp}.bias"] = slot.bias
                continue
            params[f"{sp}.w_shared"] = slot.w_shared
            params[f"{sp}.bias"] = slot.bias
            for ei, e in enumerate(slot.experts):
                params[f"{sp}.experts.{ei}.a"] = e.a
                params[f"{sp}.experts.{ei}.b"] = e.b
            params[f"{sp}.router.w_local"] = slot.router.w_local
            params[f"{sp}.router.w_fusion"] = slot.router.w_fusion
    if state.w_global is not None:
        params["w_global"] = state.w_global
    return params


def tensor_kind(name: str) -> str:
    """Coarse tensor category used in grad-check reports."""
    tail = name.rsplit(".", 1)[-1]
    if name == "w_global":
        return "w_global"
    if ".router." in name:
        return tail
    if ".experts." in name:
        return "lora_" + tail
    if ".ln" in name:
        return "layer_norm"
    if tail in ("w_shared", "weight"):
        return "attention_weight" if name.split(".")[2] in ATTENTION_SLOTS else "ffn_weight"
    return "bias"


def count_parameters(state: EncoderState, per_slot: bool = False):
    """Total trainable parameter count, optionally with a per-slot breakdown."""
    params = named_parameters(state)
    total = sum(int(v.size) for v in params.values())
    if not per_slot:
        return total
    breakdown: Dict[str, int] = {}
    for name, v in params.items():
        parts = name.split(".")
        key = "w_global" if name == "w_global" else ".".join(parts[:3])
        breakdown[key] = breakdown.get(key, 0) + int(v.size)
    return total, breakdown


def config_param_counts(config: EncoderConfig) -> Dict[str, int]:
    """Per-slot parameter counts computed from shapes alone (no allocation)."""
    d = config.d_h
    moles = set(config.mole_slots())
    counts: Dict[str, int] = {}
    for bi in range(config.num_blocks):
        counts[f"blocks.{bi}.ln1"] = 2 * d
        counts[f"blocks.{bi}.ln2"] = 2 * d
        for slot in SLOTS:
            d_in, d_out = _slot_dims(config, slot)
            if slot in moles:
                counts[f"blocks.{bi}.{slot}"] = param_count_formula(
                    d_in, d_out, config.num_experts, config.lora_rank, d_in)
            else:
                counts[f"blocks.{bi}.{slot}"] = d_out * d_in + d_out
    if moles:
        counts["w_global"] = d * config.num_experts
    return counts


def randomize_parameters(state: EncoderState, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every parameter in place with U(-scale, scale) draws.

    Layer-norm gains are drawn around 1.  Used to move away from the
    B_i = 0 initialisation before gradient checking.
    """
    for name, v in named_parameters(state).items():
        draw = rng.uniform(-scale, scale, size=v.shape)
        if name.endswith(".gain"):
            draw += 1.0
        v[...] = draw


# --------------------------------------------------------------------------
# forward / backward primitives


def _ln_forward(x, ln: LayerNorm):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * ln.gain[..., None, :] + ln.offset[..., None, :], (xhat, inv)


def _ln_backward(cache, ln: LayerNorm, g):
    xhat, inv = cache
    d_gain = np.sum(g * xhat, axis=0)
    d_offset = g.sum(axis=0)
    dxhat = g * ln.gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, d_gain, d_offset


def _slot_forward(slot: Slot, x, p_global, mode):
    if isinstance(slot, Linear):
        return x @ np.swapaxes(slot.weight, -1, -2) + slot.bias[..., None, :], (x, None, None)
    p, rcache = combine(x, p_global, slot.router, mode)
    return mole_apply(slot, x, p), (x, p, rcache)


def _slot_backward(slot: Slot, cache, g, prefix: str, grads: dict):
    """Accumulate slot parameter gradients into ``grads``.

    Returns ``(d_x, d_p_global)``.
    """
    x, p, rcache = cache
    if isinstance(slot, Linear):
        grads[f"{prefix}.weight"] = g.T @ x
        grads[f"{prefix}.bias"] = g.sum(axis=0)
        return g @ slot.weight, None
    mg = mole_backward(slot, x, p, g)
    grads[f"{prefix}.w_shared"] = mg.w_shared
    grads[f"{prefix}.bias"] = mg.bias
    for ei in range(slot.num_experts):
        grads[f"{prefix}.experts.{ei}.a"] = mg.a[ei]
        grads[f"{prefix}.experts.{ei}.b"] = mg.b[ei]
    d_x, d_pg, rgrads = combine_backward(rcache, slot.router, mg.p)
    grads[f"{prefix}.router.w_local"] = rgrads["w_local"]
    grads[f"{prefix}.router.w_fusion"] = rgrads["w_fusion"]
    return mg.x_in + d_x, d_pg


def _split_heads(x, heads):
    *lead, t, d = x.shape
    return np.swapaxes(x.reshape(*lead, t, heads, d // heads), -2, -3)


def _merge_heads(x):
    *lead, h, t, dk = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, t, h * dk)


def _swish(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def global_distribution(state: EncoderState, x_s: np.ndarray) -> Optional[np.ndarray]:
    """The shared global expert distribution for ``x_s`` (None without MoLE slots)."""
    if state.w_global is None:
        return None
    return softmax_rows(x_s @ state.w_global)


def encode_with_tape(state: EncoderState, x_s: np.ndarray):
    """Forward pass that also returns the tape needed by :func:`encode_backward`."""
    cfg = state.config
    x_s = np.asarray(x_s, dtype=np.float64)
    if x_s.ndim != 2 or x_s.shape[1] != cfg.d_h:
        raise ShapeError(f"input {x_s.shape} does not match d_h={cfg.d_h}")
    if not np.isfinite(x_s).all():
        raise InvalidInputError("input features contain NaN or Inf")
    mode = cfg.fusion_mode
    p_global = global_distribution(state, x_s) if mode != "local_only" else None
    heads = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.d_h // heads)
    x = x_s
    tape = {"x_s": x_s, "p_global": p_global, "blocks": []}
    for block in state.blocks:
        s = block.slots
        z, ln1c = _ln_forward(x, block.ln1)
        q, qc = _slot_forward(s["q"], z, p_global, mode)
        k, kc = _slot_forward(s["k"], z, p_global, mode)
        v, vc = _slot_forward(s["v"], z, p_global, mode)
        qh, kh, vh = (_split_heads(m, heads) for m in (q, k, v))
        att = softmax_rows(qh @ np.swapaxes(kh, -1, -2) * scale)
        ctx = _merge_heads(att @ vh)
        o, oc = _slot_forward(s["o"], ctx, p_global, mode)
        h = x + o
        z2, ln2c = _ln_forward(h, block.ln2)
        a1, f1c = _slot_forward(s["ffn1"], z2, p_global, mode)
        act, sig = _swish(a1)
        f, f2c = _slot_forward(s["ffn2"], act, p_global, mode)
        x = h + f
        tape["blocks"].append({
            "ln1": ln1c, "ln2": ln2c, "q": qc, "k": kc, "v": vc, "o": oc,
            "ffn1": f1c, "ffn2": f2c, "heads": (qh, kh, vh, att), "a1": a1, "sig": sig,
        })
    return x, tape


def encode(state: EncoderState, x_s: np.ndarray) -> np.ndarray:
    """Run ``x_s`` (T x d_h) through every block."""
    return encode_with_tape(state, x_s)[0]


def encode_backward(state: EncoderState, tape: dict, grad_out: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * encode(x_s))`` for every parameter.

    The returned dict is keyed like :func:`named_parameters` and also carries
    ``"x_s"``, the gradient w.r.t. the raw input.
    """
    cfg = state.config
    heads = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.d_h // heads)
    grads: Dict[str, np.ndarray] = {}
    d_pg_total = None

    def add_pg(d):
        nonlocal d_pg_total
        if d is not None:
            d_pg_total = d if d_pg_total is None else d_pg_total + d

    g = grad_out
    for bi in reversed(range(len(state.blocks))):
        block = state.blocks[bi]
        t = tape["blocks"][bi]
        s = block.slots
        pre = f"blocks.{bi}"
        # out = h + ffn2(swish(ffn1(ln2(h))))
        d_act, d_pg = _slot_backward(s["ffn2"], t["ffn2"], g, f"{pre}.ffn2", grads)
        add_pg(d_pg)
        a1, sig = t["a1"], t["sig"]
        d_a1 = d_act * (sig + a1 * sig * (1.0 - sig))
        d_z2, d_pg = _slot_backward(s["ffn1"], t["ffn1"], d_a1, f"{pre}.ffn1", grads)
        add_pg(d_pg)
        d_h, grads[f"{pre}.ln2.gain"], grads[f"{pre}.ln2.offset"] = _ln_backward(
            t["ln2"], block.ln2, d_z2)
        d_h = d_h + g
        # h = x + o(attention)
        d_ctx, d_pg = _slot_backward(s["o"], t["o"], d_h, f"{pre}.o", grads)
        add_pg(d_pg)
        qh, kh, vh, att = t["heads"]
        d_ctx_h = _split_heads(d_ctx, heads)
        d_att = d_ctx_h @ vh.transpose(0, 2, 1)
        d_vh = att.transpose(0, 2, 1) @ d_ctx_h
        d_scores = softmax_rows_backward(att, d_att) * scale
        d_qh = d_scores @ kh
        d_kh = d_scores.transpose(0, 2, 1) @ qh
        d_z = np.zeros_like(d_ctx)
        for name, d_m in (("q", d_qh), ("k", d_kh), ("v", d_vh)):
            dz, d_pg = _slot_backward(s[name], t[name], _merge_heads(d_m), f"{pre}.{name}", grads)
            add_pg(d_pg)
            d_z += dz
        d_x, grads[f"{pre}.ln1.gain"], grads[f"{pre}.ln1.offset"] = _ln_backward(
            t["ln1"], block.ln1, d_z)
        g = d_x + d_h
    if state.w_global is not None:
        x_s = tape["x_s"]
        if d_pg_total is None:
            grads["w_global"] = np.zeros_like(state.w_global)
        else:
            d_logits = softmax_rows_backward(tape["p_global"], d_pg_total)
            grads["w_global"] = x_s.T @ d_logits
            g = g + d_logits @ state.w_global.T
    grads["x_s"] = g
    return grads


def mse_loss(y: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((y - target) ** 2))


def loss_and_grads(state: EncoderState, x_s: np.ndarray, target: np.ndarray):
    y, tape = encode_with_tape(state, x_s)
    grad_out = 2.0 * (y - target) / y.size
    return mse_loss(y, target), encode_backward(state, tape, grad_out)


# --------------------------------------------------------------------------
# gradient checking


def _replace_path(obj, parts, value):
    if not parts:
        return value
    head, rest = parts[0], parts[1:]
    if isinstance(obj, list):
        new = list(obj)
        new[int(head)] = _replace_path(obj[int(head)], rest, value)
        return new
    if isinstance(obj, dict):
        new = dict(obj)
        new[head] = _replace_path(obj[head], rest, value)
        return new
    # frozen dataclasses: shallow copy, skip __post_init__ validation so a
    # batched (K x ...) tensor can stand in for the parameter
    new = copy.copy(obj)
    object.__setattr__(new, head, _replace_path(getattr(obj, head), rest, value))
    return new


def with_parameter(state: EncoderState, name: str, value: np.ndarray) -> EncoderState:
    """Copy of ``state`` with parameter ``name`` replaced by ``value``.

    ``value`` may carry a leading batch axis; :func:`encode` then evaluates
    every variant at once and returns a ``K x T x d_h`` array.  The original
    state is left untouched.
    """
    parts = name.split(".")
    if parts[0] == "blocks" and parts[2] not in ("ln1", "ln2"):
        parts.insert(2, "slots")
    return _replace_path(state, parts, value)


@dataclass
class GradCheckReport:
    tolerance: float
    errors: Dict[str, float]  # per named tensor
    zero_tensors: List[str]  # tensors whose analytic gradient is exactly zero

    @property
    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance

    def by_kind(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for name, err in self.errors.items():
            kind = tensor_kind(name)
            out[kind] = max(out.get(kind, 0.0), err)
        return out

    def summary(self) -> str:
        name, err = self.worst
        status = "ok" if self.passed else "FAILED"
        return f"{status}: worst relative error {err:.3e} in {name} (tolerance {self.tolerance:g})"


#: Tensors whose gradient norm falls below this fraction of the full
#: gradient norm are compared against that floor instead of their own norm
#: (e.g. the key bias, whose exact gradient is zero).
GRAD_FLOOR_FRACTION = 1e-3


def encoder_grad_check(config: EncoderConfig, rng: np.random.Generator, tolerance: float = 1e-6,
                       *, frames: int = 4, eps: float = 1e-5) -> GradCheckReport:
    """Compare backprop against central differences for every parameter.

    The encoder is built from ``rng`` and then every parameter is redrawn
    (so LoRA ``B_i`` are nonzero).  The loss is the MSE between the encoder
    output and a random target.
    """
    if frames > 8 or config.d_h > 16 or config.num_blocks > 2:
        raise ConfigError("grad check is limited to T <= 8, d_h <= 16 and at most 2 blocks")
    state = build_encoder(config, rng)
    randomize_parameters(state, rng)
    x_s = rng.standard_normal((frames, config.d_h))
    target = rng.standard_normal((frames, config.d_h))
    _, grads = loss_and_grads(state, x_s, target)

    params = named_parameters(state)
    full_norm = float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in params)))
    floor = GRAD_FLOOR_FRACTION * full_norm
    errors, zeros = {}, []
    for name, arr in params.items():
        def f_batch(thetas, name=name):
            y = encode(with_parameter(state, name, thetas), x_s)
            # an unused parameter leaves y without a batch axis
            return np.broadcast_to(np.mean((y - target) ** 2, axis=(-2, -1)), thetas.shape[:1])

        numeric = central_diff_batched(f_batch, arr, eps)
        analytic = grads[name]
        errors[name] = relative_error(analytic, numeric, floor=floor)
        if not np.any(analytic):
            zeros.append(name)
    return GradCheckReport(tolerance=tolerance, errors=errors, zero_tensors=zeros)

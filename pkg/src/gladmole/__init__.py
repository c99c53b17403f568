"""Global-local routed mixture-of-LoRA-experts kit for multi-talker ASR.

Numerical core (routers, MoLE layer, toy encoder with hand-written
backprop) plus SOT transcript handling, PI-WER/OA-WER scoring and
overlap-ratio mixture simulation.
"""

from .encoder import EncoderConfig, build_encoder, encode, encoder_grad_check
from .errors import (ConfigError, GladError, InfeasibleError, InvalidInputError,
                     MalformedSequenceError, ShapeError)
from .metrics import OverlapBand, bucket_assign, oa_wer, pi_wer, score_corpus, word_edit_distance
from .mixsim import build_manifest, make_mixture, overlap_ratio
from .mole import LoraExpert, MoleLayerParams, count_params, mole_backward, mole_forward
from .routing import RouterParams, fuse, fusion_weights, global_route, local_route, static_fuse
from .sot import SpeakerUtterance, SotSequence, deserialize, serialize
from .tensor import central_diff, make_rng, matmul, softmax_rows

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "build_encoder", "encode", "encoder_grad_check",
    "ConfigError", "GladError", "InfeasibleError", "InvalidInputError", "MalformedSequenceError",
    "ShapeError",
    "OverlapBand", "bucket_assign", "oa_wer", "pi_wer", "score_corpus", "word_edit_distance",
    "build_manifest", "make_mixture", "overlap_ratio",
    "LoraExpert", "MoleLayerParams", "count_params", "mole_backward", "mole_forward",
    "RouterParams", "fuse", "fusion_weights", "global_route", "local_route", "static_fuse",
    "SpeakerUtterance", "SotSequence", "deserialize", "serialize",
    "central_diff", "make_rng", "matmul", "softmax_rows",
]

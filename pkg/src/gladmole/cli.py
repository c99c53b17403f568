"""``gladmole`` command-line entry point.

Exit codes: 0 success, 1 validation failure (bad flags, bad config, failed
check, id mismatch, infeasible request), 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, Optional

from .encoder import PLACEMENTS, EncoderConfig, config_param_counts, encoder_grad_check
from .errors import GladError, IdMismatchError
from .metrics import score_corpus
from .mixsim import (REFERENCE_COMPOSITION_HOURS, build_manifest, format_composition,
                     parse_composition, read_corpus, summarize_manifest)
from .mole import router_from_json
from .routing import FUSION_MODES, combine, global_route, init_router
from .sot import DEFAULT_SEPARATOR, read_hypotheses, read_references, write_jsonl
from .tensor import make_rng, read_tsv, write_tsv

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    env = os.environ.get("GLAD_SEED")
    if env is None:
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GLAD_SEED must be an integer, got {env!r}") from None


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, text: str = "") -> None:
        if not self.quiet:
            print(text)


def _load_config(path: Optional[str]) -> EncoderConfig:
    if path is None:
        return EncoderConfig()
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return EncoderConfig.from_json(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_grad_check(args, out) -> int:
    config = _load_config(args.config)
    rng = make_rng(args.seed)
    worst: Dict[str, float] = {}
    worst_tensor = (None, 0.0)
    zero_w_global = True
    for trial in range(args.trials):
        report = encoder_grad_check(config, rng, args.tol, frames=args.frames, eps=args.eps)
        for kind, err in report.by_kind().items():
            worst[kind] = max(worst.get(kind, 0.0), err)
        name, err = report.worst
        if name is not None and err >= worst_tensor[1]:
            worst_tensor = (name, err)
        zero_w_global &= "w_global" in report.zero_tensors
        out(f"trial {trial}: {report.summary()}")
    out(f"{'tensor':<18}{'max rel. error':>16}")
    for kind in sorted(worst):
        flag = "" if worst[kind] < args.tol else "  FAIL"
        out(f"{kind:<18}{worst[kind]:>16.3e}{flag}")
    if config.fusion_mode == "local_only" and "w_global" in worst and zero_w_global:
        out("w_global gradient is exactly zero (global router unused in local_only mode)")
    ok = all(v < args.tol for v in worst.values())
    if ok:
        out(f"PASS: all tensors below {args.tol:g}")
        return EXIT_OK
    print(f"FAIL: worst tensor {worst_tensor[0]} with relative error {worst_tensor[1]:.3e} "
          f"(tolerance {args.tol:g})", file=sys.stderr)
    return EXIT_INVALID


def cmd_count_params(args, out) -> int:
    config = _load_config(args.config)
    counts = config_param_counts(config)
    total = sum(counts.values())
    out(f"placement={config.placement} fusion_mode={config.fusion_mode} "
        f"blocks={config.num_blocks} d_h={config.d_h} d_ffn={config.d_ffn} "
        f"experts={config.num_experts} rank={config.lora_rank}")
    if args.per_layer:
        plain = EncoderConfig(**dict(config.to_dict(), placement="none"))
        plain_counts = config_param_counts(plain)
        out(f"{'slot':<18}{'params':>12}{'delta':>10}")
        for key, n in counts.items():
            delta = n - plain_counts.get(key, 0)
            out(f"{key:<18}{n:>12d}{delta:>10d}")
    out(f"total: {total} ({total / 1e6:.2f}M)")
    by_placement = {
        p: sum(config_param_counts(EncoderConfig(**dict(config.to_dict(), placement=p))).values())
        for p in PLACEMENTS
    }
    out("  ".join(f"{p}={n}" for p, n in by_placement.items()))
    ordered = (by_placement["none"] < by_placement["ffn_only"] < by_placement["both"]
               and by_placement["none"] < by_placement["attention_only"] < by_placement["both"])
    if not ordered:
        print("ordering none < ffn_only/attention_only < both violated", file=sys.stderr)
        return EXIT_INVALID
    out("ordering none < ffn_only, attention_only < both: ok")
    return EXIT_OK


def cmd_score(args, out) -> int:
    refs = read_references(args.refs)
    hyps = read_hypotheses(args.hyps)
    try:
        report = score_corpus(refs, hyps, args.separator)
    except IdMismatchError as exc:
        if exc.missing:
            print("ids without hypothesis: " + " ".join(exc.missing), file=sys.stderr)
        if exc.extra:
            print("ids without reference: " + " ".join(exc.extra), file=sys.stderr)
        return EXIT_INVALID
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2)
            fh.write("\n")
    out(report.table())
    return EXIT_OK


def cmd_mix(args, out) -> int:
    corpus = read_corpus(args.corpus)
    composition = parse_composition(args.composition)
    scale = args.scale
    composition = {b: h * scale for b, h in composition.items()}
    manifest = build_manifest(corpus, composition, args.single * scale, make_rng(args.seed))
    if args.out:
        write_jsonl((m.to_json() for m in manifest), args.out)
    out(format_composition(summarize_manifest(manifest)))
    return EXIT_OK


def cmd_route(args, out) -> int:
    x_s = read_tsv(args.xs)
    x_in = read_tsv(args.xin) if args.xin else x_s
    if args.router:
        with open(args.router, encoding="utf-8") as fh:
            router = router_from_json(json.load(fh))
    else:
        router = init_router(make_rng(args.seed), x_in.shape[1], args.experts, d_global=x_s.shape[1])
    p_global = None
    if args.mode != "local_only":
        p_global = global_route(x_s, router)
    p, _ = combine(x_in, p_global, router, args.mode)
    if args.out:
        write_tsv(p, args.out)
    else:
        write_tsv(p, sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help=f"RNG seed (default: $GLAD_SEED or {DEFAULT_SEED})")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="suppress informational output")

    parser = _Parser(prog="gladmole", parents=[common],
                     description="Global-local routed mixture-of-LoRA-experts toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    config_help = ("encoder config JSON object with keys num_blocks, d_h, num_heads, d_ffn, "
                   "num_experts, lora_rank, lora_scale, placement ("
                   + "|".join(PLACEMENTS) + "), fusion_mode (" + "|".join(FUSION_MODES) + ")")

    p = sub.add_parser("grad-check", parents=[common],
                       help="check encoder backprop against central finite differences")
    p.add_argument("--config", help=config_help + "; default: small 1-block config")
    p.add_argument("--tol", type=float, default=1e-6, help="max relative error (default 1e-6)")
    p.add_argument("--trials", type=int, default=10, help="number of random encoders (default 10)")
    p.add_argument("--frames", type=int, default=4, help="sequence length T, at most 8 (default 4)")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("count-params", parents=[common],
                       help="count encoder parameters and check placement ordering")
    p.add_argument("--config", help=config_help + "; default: small 1-block config")
    p.add_argument("--per-layer", action="store_true", help="print per-slot counts and MoLE deltas")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("score", parents=[common], help="PI-WER / OA-WER scoring of SOT hypotheses")
    p.add_argument("--refs", required=True,
                   help='reference JSONL: {"id", "speakers": [{"words", "start"}], "ratio"}')
    p.add_argument("--hyps", required=True, help='hypothesis JSONL: {"id", "sot"}')
    p.add_argument("--out", help="write the JSON report here "
                   "({units, pooled, per_band{low,mid,high}, oa_wer, warnings, ...})")
    p.add_argument("--separator", default=DEFAULT_SEPARATOR,
                   help=f"speaker-change token (default {DEFAULT_SEPARATOR!r})")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("mix", parents=[common], help="build a band-targeted mixture manifest")
    p.add_argument("--corpus", required=True, help='corpus JSONL: {"id", "duration", "word_count"}')
    default_comp = ",".join(f"{b}:{REFERENCE_COMPOSITION_HOURS[b]}" for b in ("low", "mid", "high"))
    p.add_argument("--composition", default=default_comp,
                   help=f"two-talker hours per band (default {default_comp})")
    p.add_argument("--single", type=float, default=REFERENCE_COMPOSITION_HOURS["1mix"],
                   help=f"single-talker hours (default {REFERENCE_COMPOSITION_HOURS['1mix']})")
    p.add_argument("--scale", type=float, default=1.0, help="multiply every hour target (default 1)")
    p.add_argument("--out", help='manifest JSONL: {"id", "components": [{"utt", "offset"}], '
                   '"ratio", "band", "total_duration"}')
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("route", parents=[common], help="compute expert distributions for TSV features")
    p.add_argument("--xs", required=True, help="raw features TSV (T x d_h)")
    p.add_argument("--xin", help="layer input TSV (T x d); default: the raw features")
    p.add_argument("--router", help='router JSON {"w_global", "w_local", "w_fusion"}, each '
                   '{"shape", "data"}; default: random from --seed')
    p.add_argument("--experts", type=int, default=3, help="experts for a random router (default 3)")
    p.add_argument("--mode", choices=FUSION_MODES, default="dynamic", help="fusion mode")
    p.add_argument("--out", help="output TSV (default stdout)")
    p.set_defaults(func=cmd_route)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not hasattr(args, "seed"):
            args.seed = _default_seed()
        args.quiet = getattr(args, "quiet", False)
        return args.func(args, _Out(args.quiet))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except GladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion also fails the run.
"""

import itertools
import time

import numpy as np

from gladmole.errors import MalformedSequenceError
from gladmole.encoder import (REFERENCE_CONFIG, PLACEMENTS, EncoderConfig, build_encoder,
                              config_param_counts, encode, encoder_grad_check, loss_and_grads,
                              randomize_parameters)
from gladmole.metrics import bucket_assign, oa_wer, pi_wer, round_percent, word_edit_distance
from gladmole.mixsim import (REFERENCE_COMPOSITION_HOURS, UtteranceMeta, build_manifest, make_mixture,
                             overlap_ratio, summarize_manifest)
from gladmole.mole import LoraExpert, MoleLayerParams, init_mole_layer, mole_forward
from gladmole.routing import RouterParams, fuse, fusion_weights, global_route, local_route
from gladmole.sot import SotSequence, SpeakerUtterance, deserialize, serialize
from gladmole.tensor import make_rng


def test_c1_oa_wer_arithmetic(record):
    rows = [((6.0, 8.4, 12.8), 9.1), ((7.8, 7.5, 10.1), 8.5), ((23.8, 21.5, 25.5), 23.6)]
    start = time.perf_counter()
    got = [round_percent(oa_wer(dict(zip(("low", "mid", "high"), v)))) for v, _ in rows]
    elapsed = time.perf_counter() - start
    ok = got == [e for _, e in rows] and elapsed < 1e-3
    record("C1 OA-WER arithmetic", ok, f"got {got}, {elapsed * 1e6:.0f} us")
    assert ok


def test_c2_gradient_suite(record):
    start = time.perf_counter()
    worst, worst_name = 0.0, None
    for seed in range(100):
        cfg = EncoderConfig(num_blocks=1 + seed % 2, d_h=16, num_heads=2, d_ffn=32,
                            placement="both", fusion_mode="dynamic")
        report = encoder_grad_check(cfg, make_rng(seed), 1e-6, frames=4, eps=1e-5)
        name, err = report.worst
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 60
    record("C2 gradient suite (100 seeds)", ok,
           f"worst {worst:.2e} in {worst_name}, {elapsed:.1f} s")
    assert ok


def test_c3_routing_invariants(record):
    rng = make_rng(3)
    worst_sum, envelope_ok, endpoint_ok = 0.0, True, True
    for _ in range(1000):
        d, n, t = int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 6))
        scale = float(rng.uniform(0.1, 5))
        router = RouterParams(w_local=scale * rng.standard_normal((d, n)),
                              w_fusion=scale * rng.standard_normal((d, 2)),
                              w_global=scale * rng.standard_normal((d, n)))
        x_s, x_in = rng.standard_normal((t, d)) * 3, rng.standard_normal((t, d)) * 3
        pg, pl = global_route(x_s, router), local_route(x_in, router)
        alpha = fusion_weights(x_in, router)
        p = fuse(pg, pl, alpha)
        for m in (pg, pl, p, alpha):
            worst_sum = max(worst_sum, float(np.max(np.abs(m.sum(axis=1) - 1.0))))
        lo, hi = np.minimum(pg, pl), np.maximum(pg, pl)
        envelope_ok &= bool(np.all(p >= lo - 1e-15) and np.all(p <= hi + 1e-15))
        endpoint = np.tile([1.0, 0.0], (t, 1))
        endpoint_ok &= bool(np.array_equal(fuse(pg, pl, endpoint), pg))
    ok = worst_sum < 1e-9 and envelope_ok and endpoint_ok
    record("C3 routing invariants (1000 instances)", ok,
           f"max |row sum - 1| {worst_sum:.1e}, envelope {envelope_ok}, endpoint {endpoint_ok}")
    assert ok


def test_c4_mole_degeneracies(record):
    rng = make_rng(4)
    layer = init_mole_layer(rng, 12, 10, 3, 2, 4.0)
    x = rng.standard_normal((6, 12))
    p = rng.dirichlet(np.ones(3), size=6)
    zero_b = float(np.max(np.abs(mole_forward(layer, x, p) - (x @ layer.w_shared.T + layer.bias))))

    unit = init_mole_layer(rng, 256, 256, 3, 8, 8.0).multiplier

    experts = [LoraExpert(e.a, rng.standard_normal(e.b.shape)) for e in layer.experts]
    full = MoleLayerParams(layer.w_shared, layer.bias, experts, layer.lora_scale)
    lin = 0.0
    for _ in range(100):
        p1, p2 = rng.dirichlet(np.ones(3), size=6), rng.dirichlet(np.ones(3), size=6)
        lam = rng.random()
        lhs = mole_forward(full, x, lam * p1 + (1 - lam) * p2)
        rhs = lam * mole_forward(full, x, p1) + (1 - lam) * mole_forward(full, x, p2)
        lin = max(lin, float(np.max(np.abs(lhs - rhs))))
    ok = zero_b <= 1e-12 and unit == 1.0 and lin <= 1e-10
    record("C4 MoLE degeneracies", ok,
           f"B=0 gap {zero_b:.1e}, multiplier {unit}, linearity gap {lin:.1e}")
    assert ok


def _edit_oracle(ref, hyp):
    # Wagner-Fischer distance, one row at a time
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]


def test_c5_pi_wer_oracle(record):
    rng = make_rng(5)
    vocab = ["a", "b", "c", "d", "e"]
    mismatches = 0
    k1_ok = True
    for case in range(500):
        k = case % 4 + 1
        refs = [list(rng.choice(vocab, size=rng.integers(1, 7))) for _ in range(k)]
        hyps = [list(rng.choice(vocab, size=rng.integers(0, 7))) for _ in range(k)]
        brute = min(sum(_edit_oracle(refs[i], hyps[perm[i]]) for i in range(k))
                    for perm in itertools.permutations(range(k)))
        mismatches += pi_wer(refs, hyps).errors != brute
        if k == 1:
            k1_ok &= pi_wer(refs, hyps) == word_edit_distance(refs[0], hyps[0])
    ok = mismatches == 0 and k1_ok
    record("C5 PI-WER vs exhaustive bijections (500 cases)", ok,
           f"{mismatches} mismatches, K=1 equals edit distance: {k1_ok}")
    assert ok


def test_c6_sot_round_trip(record):
    rng = make_rng(6)
    vocab = [f"w{i}" for i in range(30)]
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        utts = [SpeakerUtterance(tuple(rng.choice(vocab, size=rng.integers(1, 8))),
                                 float(rng.integers(0, 4)))  # integer starts force ties
                for _ in range(n)]
        expected = [list(u.words) for u in sorted(utts, key=lambda u: u.start_time)]
        failures += deserialize(serialize(utts)) != expected
    fixtures = ["$ a b", "a b $", "a $ $ b", "$", "", "$ a $ b $", "a $ b $ $"]
    rejected = 0
    for text in fixtures:
        try:
            deserialize(SotSequence.from_text(text), strict=True)
        except MalformedSequenceError:
            rejected += 1
    ok = failures == 0 and rejected == len(fixtures)
    record("C6 SOT round-trip (1000 sets) and strict rejection", ok,
           f"{failures} round-trip failures, {rejected}/{len(fixtures)} malformed rejected")
    assert ok


def _grid_ratio(intervals, h=0.01):
    lo, hi = min(s for s, _ in intervals), max(e for _, e in intervals)
    mids = lo + h * (np.arange(int(np.ceil((hi - lo) / h))) + 0.5)
    active = sum((mids > s) & (mids < e) for s, e in intervals)
    return np.count_nonzero(active >= 2) * h / (hi - lo), h / (hi - lo)


def test_c7_overlap_machinery(record):
    bands = [bucket_assign(r).value for r in (0.2, 0.5, 1.0, 0.0)]
    bands_ok = bands == ["low", "mid", "high", "none"]
    third = abs(overlap_ratio([(0, 10), (5, 15)]) - 1 / 3)

    rng = make_rng(7)
    grid_bad = 0
    for _ in range(500):
        utts = [UtteranceMeta(str(i), float(d)) for i, d in enumerate(rng.uniform(0.5, 15, 2))]
        spec = make_mixture(utts, rng)
        intervals = [(o, o + u.duration) for u, (_, o) in zip(utts, spec.components)]
        approx, cell = _grid_ratio(intervals)
        grid_bad += abs(spec.overlap_ratio - approx) > cell

    corpus = [UtteranceMeta(f"u{i:05d}", float(d))
              for i, d in enumerate(make_rng(8).uniform(2, 20, 4000))]
    targets = {k: v / 100 for k, v in REFERENCE_COMPOSITION_HOURS.items()}
    manifest = build_manifest(corpus, {b: targets[b] for b in ("low", "mid", "high")},
                              targets["1mix"], make_rng(9))
    summary = summarize_manifest(manifest)
    devs = {b: summary[b]["hours"] / h - 1 for b, h in targets.items()}
    manifest_ok = all(abs(v) <= 0.02 for v in devs.values())

    ok = bands_ok and third <= 1e-9 and grid_bad == 0 and manifest_ok
    worst_dev = max(abs(v) for v in devs.values())
    record("C7 overlap machinery", ok,
           f"bands {bands}, |r - 1/3| {third:.1e}, grid misses {grid_bad}/500, "
           f"worst manifest deviation {100 * worst_dev:.2f}%")
    assert ok


def test_c8_ablation_structure(record):
    counts = {p: sum(config_param_counts(EncoderConfig(**dict(REFERENCE_CONFIG.to_dict(), placement=p)))
                     .values()) for p in PLACEMENTS}
    order_ok = (counts["none"] < counts["attention_only"] < counts["both"]
                and counts["none"] < counts["ffn_only"] < counts["both"])

    cfg = EncoderConfig(num_blocks=2, d_h=16, num_heads=2, d_ffn=32, fusion_mode="local_only")
    state = build_encoder(cfg, make_rng(10))
    randomize_parameters(state, make_rng(11))
    x = make_rng(12).standard_normal((4, 16))
    _, grads = loss_and_grads(state, x, make_rng(13).standard_normal((4, 16)))
    zero_global = not np.any(grads["w_global"])

    base = dict(num_blocks=2, d_h=16, num_heads=2, d_ffn=32)
    plain = build_encoder(EncoderConfig(**base, placement="none"), make_rng(14))
    moled = build_encoder(EncoderConfig(**base, placement="both"), make_rng(14))
    same = np.array_equal(encode(plain, x), encode(moled, x))

    ok = order_ok and zero_global and same
    record("C8 ablation structure", ok,
           f"counts {counts}, local_only W_global grad zero {zero_global}, B=0 identical {same}")
    assert ok

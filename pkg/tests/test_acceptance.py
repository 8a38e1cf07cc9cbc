"""Acceptance criteria 1-8.

Every test prints one ``[criterion N] PASS|FAIL: ...`` line.  Criteria 7 and
8 run the full toy pipeline (six runs in total) and dominate the runtime.

    pytest tests/test_acceptance.py -v
"""
import math
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from cgadapt import autodiff as ad
from cgadapt.autodiff import Tensor
from cgadapt.backend import PLDA, fit_plda, plda_score
from cgadapt.dsp import AudioSignal, AugmentSpec, convolve_rir, filter_top_half_by_snr, mix_noise_at_snr
from cgadapt.formats import ManifestEntry
from cgadapt.metrics import compute_eer, compute_min_dcf
from cgadapt.models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
)
from cgadapt.pipeline import run_toy_pipeline, toy_config
from cgadapt.training import (
    TrainConfig,
    adv_loss,
    cycle_loss,
    disc_loss,
    lr_at_epoch,
    steps_per_epoch,
    total_generator_loss,
    train,
)

from gradcheck import max_rel_error
from test_autodiff import OP_CASES
from test_backend import _synth_plda, brute_dcf, brute_eer, oracle_llr, rel_fro
from test_models import GRID
from test_training import (
    LOSS_CASES,
    SHAPE,
    constant_disc,
    nets,
    oracle_adv,
    oracle_cycle,
    oracle_disc,
    oracle_total,
    stores,
)

TOY_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(capsys):
    def report(num: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, detail

    return report


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    errs = {}
    for name, build in OP_CASES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        fn, ts = build(rng)
        errs[name] = max_rel_error(fn, ts, rng)
    for name, build in LOSS_CASES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        fn, ts = build(rng)
        errs["loss_" + name] = max_rel_error(fn, ts, rng, n_probe=3, h=(1e-5, 1e-6))
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = len(errs) >= 20 and errs[worst] <= 1e-4 and dt < 120
    verdict(1, ok, f"{len(errs)} cases, worst rel err {errs[worst]:.2e} ({worst}), {dt:.1f}s")


def test_criterion_2_loss_oracles(verdict):
    diffs = []
    for seed in (3, 7, 11, 19):
        rng = np.random.default_rng(seed)
        xs, xt = rng.normal(size=SHAPE), rng.normal(1.0, 2.0, size=SHAPE)
        g_st, g_ts, d_s, d_t = nets(seed)
        diffs.append(abs(disc_loss(d_s, g_ts, xs, xt).item() - oracle_disc(d_s, g_ts, xs, xt)))
        diffs.append(abs(disc_loss(d_t, g_st, xt, xs).item() - oracle_disc(d_t, g_st, xt, xs)))
        diffs.append(abs(adv_loss(d_s, g_ts, xt).item() - oracle_adv(d_s, g_ts, xt)))
        diffs.append(abs(adv_loss(d_t, g_st, xs).item() - oracle_adv(d_t, g_st, xs)))
        diffs.append(abs(cycle_loss(g_st, g_ts, xs, xt).item() - oracle_cycle(g_st, g_ts, xs, xt)))
        total, _ = total_generator_loss(TrainConfig(), g_st, g_ts, d_s, d_t, xs, xt)
        diffs.append(abs(total.item() - oracle_total(1.0, 2.5, g_st, g_ts, d_s, d_t, xs, xt)))
    rng = np.random.default_rng(0)
    xs, xt = rng.normal(size=SHAPE), rng.normal(size=SHAPE)
    half = disc_loss(constant_disc(0.5), nets()[1], xs, xt).item()
    g_st, g_ts, _, _ = nets(5)
    one = constant_disc(1.0)
    total, parts = total_generator_loss(TrainConfig(), g_st, g_ts, one, one, xs, xt)
    weighted = abs(total.item() - 2.5 * parts["cyc"].item())
    ok = max(diffs) <= 1e-12 and abs(half - 0.5) <= 1e-12 and weighted <= 1e-12
    verdict(2, ok, f"max |loss - oracle| {max(diffs):.1e} over {len(diffs)} evaluations; "
                   f"D=0.5 gives {half}; total - 2.5*cyc = {weighted:.1e}")


def test_criterion_3_architecture(verdict):
    t0 = time.perf_counter()
    x = np.random.default_rng(0).normal(size=(1, 1, 40, 127))
    g = build_generator(GeneratorSpec(), seed=0)
    trace = {}
    with ad.no_grad():
        y = generator_forward(g, Tensor(x), trace=trace)
        d_out = discriminator_forward(build_discriminator(DiscriminatorSpec(), seed=0), Tensor(x)).shape
        small = build_generator(GeneratorSpec(2, 1, zero_init_last=False), seed=3)
        bad = [(h, w) for h in GRID for w in GRID
               if generator_forward(small, Tensor(np.zeros((1, 1, h, w)))).shape != (1, 1, h, w)]
    dt = time.perf_counter() - t0
    ok = (trace["bottleneck"] == (1, 128, 10, 32) and y.shape == (1, 1, 40, 127)
          and np.array_equal(y.data, x) and d_out == (1, 1, 5, 16) and not bad and dt < 60)
    verdict(3, ok, f"bottleneck {trace['bottleneck']}, output {y.shape}, D {d_out}, "
                   f"identity exact {np.array_equal(y.data, x)}, grid failures {len(bad)}/{len(GRID) ** 2}, {dt:.1f}s")


def test_criterion_4_schedule(verdict, tmp_path):
    cfg = TrainConfig()
    got = [lr_at_epoch(cfg, e, cfg.lr_gen) for e in (1, 15, 16, 50)]
    want = [3e-4, 3e-4, 3e-4 + (1e-6 - 3e-4) / 35, 1e-6]
    lr_ok = got[0] == want[0] and got[1] == want[1] and got[3] == want[3] and math.isclose(got[2], want[2], rel_tol=1e-12)
    steps_ok = all(steps_per_epoch(n, 32) == math.ceil(n / 32) for n in range(1, 300))
    # and the trainer really takes that many steps
    src, tgt = stores(n=5)
    small = TrainConfig(batch_size=2, seq_len=16, epochs=1, plateau_epochs=0, gen_base=2, n_resblocks=1, disc_base=2)
    lines = []

    class Sink:
        def write(self, s):
            lines.append(s)

    train(small, src, tgt, tmp_path, log_fh=Sink())
    run_ok = len(lines) == math.ceil(len(src) / 2)
    verdict(4, lr_ok and steps_ok and run_ok,
            f"lr at 1/15/16/50 = {', '.join(f'{v:.6g}' for v in got)}; steps = ceil(N/32) for N<300: {steps_ok}; "
            f"trainer steps {len(lines)} for N={len(src)}, batch 2")


def test_criterion_5_augmentation(verdict):
    sr = 8000
    x = AudioSignal(np.random.default_rng(0).normal(0, 0.05, 100 * sr), sr)
    noises = [AudioSignal(np.random.default_rng(k).normal(0, 0.3, 3 * sr // 2), sr) for k in range(3)]
    events = []
    y = mix_noise_at_snr(x, noises, AugmentSpec(seed=0), np.random.default_rng(1), events)
    added = y.samples - x.samples
    dev = max(abs(10 * np.log10(np.mean(x.samples[e.start:e.end] ** 2) / np.mean(added[e.start:e.end] ** 2)) - e.snr_db)
              for e in events)
    snr_ok = len(events) == 100 and dev <= 0.1

    sig = AudioSignal(np.random.default_rng(2).uniform(-0.5, 0.5, 4000), sr)
    delta = np.array_equal(convolve_rir(sig, AudioSignal(np.array([1.0]), sr)).samples, sig.samples)

    rng = np.random.default_rng(3)
    filt_ok = True
    for n in range(1, 30):
        ids = [f"u{i:02d}" for i in range(n)]
        snr = {u: float(rng.integers(0, 4)) for u in ids}  # many ties
        make = lambda order: [ManifestEntry(u, "spk", "s", "target", sr, f"/x/{u}.wav") for u in order]
        ref = [e.utt_id for e in filter_top_half_by_snr(make(ids), snr_of=lambda e: snr[e.utt_id])]
        perm = list(rng.permutation(ids))
        again = [e.utt_id for e in filter_top_half_by_snr(make(perm), snr_of=lambda e: snr[e.utt_id])]
        filt_ok &= len(ref) == math.ceil(n / 2) and ref == again
    verdict(5, snr_ok and delta and filt_ok,
            f"{len(events)} events, worst SNR deviation {dev:.4f} dB; delta RIR exact {delta}; "
            f"top-half keeps ceil(n/2) with permutation-stable ties for n=1..29: {filt_ok}")


def test_criterion_6_metrics_and_plda(verdict):
    rng = np.random.default_rng(50)
    exact = 0
    for _ in range(50):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 3), int(rng.integers(1, 4)))
        exact += compute_eer(scores, labels) == brute_eer(scores, labels) and \
            compute_min_dcf(scores, labels) == brute_dcf(scores, labels)

    worst_llr = 0.0
    for d in (1, 2, 3):
        for _ in range(10):
            a, c = rng.normal(size=(d, d)), rng.normal(size=(d, d))
            b, w, mu = a @ a.T + 0.1 * np.eye(d), c @ c.T + 0.1 * np.eye(d), rng.normal(size=d)
            e, t = rng.normal(size=d) * 2, rng.normal(size=d) * 2
            worst_llr = max(worst_llr, abs(plda_score(PLDA(mu, b, w), e, t) - oracle_llr(b, w, mu, e, t)))

    x, lab, b_pop, w_pop, y = _synth_plda(np.random.default_rng(7), 1000, 10)
    m = fit_plda(x, lab)
    b_real = np.cov(y.T, bias=True)
    w_real = np.cov((x - np.repeat(y, 10, axis=0)).T, bias=True)
    eb, ew = rel_fro(m.between, b_real), rel_fro(m.within, w_real)
    pb, pw = rel_fro(m.between, b_pop), rel_fro(m.within, w_pop)
    ok = exact == 50 and worst_llr <= 1e-9 and eb <= 0.05 and ew <= 0.05
    verdict(6, ok, f"EER/minDCF exact on {exact}/50 sets; PLDA llr vs density oracle {worst_llr:.1e}; "
                   f"EM vs realised B,W {eb:.1%}/{ew:.1%} (vs population {pb:.1%}/{pw:.1%})")


# ------------------------------------------------------------------ toy runs


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return {s: (run_toy_pipeline(root / f"seed{s}", toy_config(s), log=lambda m: None), root / f"seed{s}")
            for s in TOY_SEEDS}


@pytest.mark.slow
def test_criterion_7_end_to_end_adaptation(verdict, toy_runs):
    rows = [r for r, _ in toy_runs.values()]
    for r in rows:
        with_pct = (f"seed {r['seed']}: L1 {r['l1_unmapped']:.3f}->{r['l1_mapped']:.3f} ({r['l1_reduction']:.1%}), "
                    f"EER {r['eer_unadapted']:.2%}->{r['eer_adapted']:.2%}, {r['seconds']:.0f}s")
        print(with_pct)
    l1_ok = all(r["l1_reduction"] >= 0.30 for r in rows)
    no_worse = all(r["eer_adapted"] <= r["eer_unadapted"] for r in rows)
    wins = sum(r["eer_adapted"] < r["eer_unadapted"] for r in rows)
    verdict(7, l1_ok and no_worse and wins >= 4,
            f"L1 reduction min {min(r['l1_reduction'] for r in rows):.1%} (need >= 30%); "
            f"adapted EER <= unadapted on {sum(r['eer_adapted'] <= r['eer_unadapted'] for r in rows)}/5, "
            f"strictly better on {wins}/5 (need >= 4); mean time {np.mean([r['seconds'] for r in rows]):.0f}s/seed")


def _artifacts(root: Path) -> dict:
    keep = (".fmap", ".fbnk", ".embd", ".wav")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in keep or p.name == "scores.txt"}


@pytest.mark.slow
def test_criterion_8_determinism(verdict, toy_runs, tmp_path):
    first, first_dir = toy_runs[TOY_SEEDS[0]]
    again_dir = tmp_path / "again"
    again = run_toy_pipeline(again_dir, toy_config(TOY_SEEDS[0]), log=lambda m: None)
    a, b = _artifacts(first_dir), _artifacts(again_dir)
    same = sorted(a) == sorted(b) and all(a[k] == b[k] for k in a)
    kinds = {k: sum(1 for p in a if p.endswith(k)) for k in (".fmap", ".fbnk", "scores.txt")}
    ok = same and all(kinds.values()) and again["eer_adapted"] == first["eer_adapted"]
    diff = [k for k in a if b.get(k) != a[k]][:3]
    verdict(8, ok, f"{len(a)} artifacts compared ({kinds}); byte-identical: {same}" + (f"; first diffs {diff}" if diff else ""))

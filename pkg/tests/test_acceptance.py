"""Acceptance criteria, each at its stated tolerance. One PASS/FAIL line per criterion is
printed in the terminal summary; the training criteria are marked ``slow``."""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mambair.blocks import ModelConfig, init_state, vssm_forward
from mambair.diagnostics import (bench_workloads, calibration_workloads, complexity_bench, compute_erf,
                                 conv_stack_forward, init_conv_stack, model_fn, reach_box)
from mambair.gradcheck import check_gradients
from mambair.pipeline.config import TrainConfig
from mambair.pipeline.data import synthetic_corpus
from mambair.pipeline.metrics import psnr_from_mse, rgb_to_y, ssim_y
from mambair.pipeline.train import evaluate, train
from mambair.selftest import random_lti, random_selective
from mambair.ssm import (discretize_zoh, selective_scan, selective_scan_parallel, selective_scan_sequential,
                         ssm_convolutional, ssm_recurrent)
from mambair.tensor import Tensor

TRAIN_IMAGES = dict(count=64, size=32, seed=0)
HELD_OUT = dict(count=8, size=32, seed=1)
ABLATIONS = {
    "remove Conv": dict(use_local_conv=False),
    "remove Conv+CA": dict(use_local_conv=False, use_channel_attention=False),
    "replace with MLP": dict(replace_with_mlp=True),
    "scan_directions=1": dict(scan_directions=1),
    "scan_directions=2": dict(scan_directions=2),
}


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1-3: numerical equivalences -----------------------------------------------

def test_criterion_01_lti_form_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        params, delta, x = random_lti(rng)
        rec = ssm_recurrent(discretize_zoh(params, delta), params.C, params.D, x)
        worst = max(worst, float(np.max(np.abs(rec - ssm_convolutional(params, delta, x)))))
    seconds = time.perf_counter() - start
    verdict(1, worst <= 1e-10 and seconds < 10, f"max abs error {worst:.2e} (<= 1e-10), {seconds:.2f}s (< 10s)")


def test_criterion_02_scan_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2025)
    worst = 0.0
    identical = True
    for _ in range(200):
        sel, x = random_selective(rng)
        par = selective_scan_parallel(sel, x)
        worst = max(worst, float(np.max(np.abs(par - selective_scan_sequential(sel, x)))))
        identical &= np.array_equal(par, selective_scan_parallel(sel, x))
        for workers in (2, 4):
            identical &= np.array_equal(par, selective_scan_parallel(sel, x, workers=workers))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-12 and identical and seconds < 10
    verdict(2, ok, f"max abs error {worst:.2e} (<= 1e-12), bit-identical across repeats and workers: "
                   f"{identical}, {seconds:.2f}s (< 10s)")


def _scan_case():
    rng = np.random.default_rng(7)
    sel, x = random_selective(rng, max_state=4, max_len=12, max_channels=3)
    while x.size * (3 + 2 * sel.B.shape[1]) + sel.A.size < 50:
        sel, x = random_selective(rng, max_state=4, max_len=12, max_channels=3)
    tensors = {"x": Tensor(x), "delta": Tensor(sel.delta), "A": Tensor(sel.A), "B": Tensor(sel.B),
               "C": Tensor(sel.C), "D": Tensor(sel.D)}
    weights = rng.normal(size=x.shape)
    order = ("x", "delta", "A", "B", "C", "D")
    return (lambda: (selective_scan(*(tensors[k] for k in order)) * weights).sum()), tensors


def _vssm_case():
    cfg = ModelConfig()
    state = init_state(cfg, seed=1)
    w = state.sub("g0.b0.vssm")
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(5, 5, cfg.channels)))
    weights = rng.normal(size=x.shape)
    return (lambda: (vssm_forward(x, w, cfg) * weights).sum()), w


def _model_case():
    state = init_state(ModelConfig(), seed=2)
    rng = np.random.default_rng(9)
    x = Tensor(rng.random((6, 6, 3)))
    weights = rng.normal(size=(6, 6, 3))
    return (lambda: (model_fn(state)(x) * weights).sum()), state.params


def test_criterion_03_gradient_correctness():
    start = time.perf_counter()
    parts = []
    ok = True
    for name, (fn, params) in (("scan", _scan_case()), ("VSSM", _vssm_case()), ("model", _model_case())):
        rep = check_gradients(fn, params, samples=60, seed=3)
        ok &= rep["count"] >= 50 and rep["max_rel_error"] <= 1e-4
        parts.append(f"{name} {rep['max_rel_error']:.1e} on {rep['count']}")
    seconds = time.perf_counter() - start
    ok &= seconds < 120
    verdict(3, ok, f"max rel error (<= 1e-4): {', '.join(parts)}; {seconds:.1f}s (< 120s)")


# --- 4-5: receptive field and scaling --------------------------------------------

def test_criterion_04_global_erf():
    start = time.perf_counter()
    size = (16, 16)
    erf = compute_erf(model_fn(init_state(ModelConfig(), seed=0)), size)
    covered = int(np.count_nonzero(erf.raw > 1e-12))
    # same width, one 3x3 conv per residual block: analytic reach of 4 pixels
    layers = 4
    conv = compute_erf(lambda x: conv_stack_forward(x, init_conv_stack(layers, 16, seed=0)), size)
    outside = int(np.count_nonzero(conv.support() & ~reach_box(size, layers)))
    seconds = time.perf_counter() - start
    ok = covered == 256 and outside == 0 and seconds < 60
    verdict(4, ok, f"toy model ERF > 1e-12 at {covered}/256 positions; {layers}-layer conv stack has "
                   f"{outside} positions outside its reach box; {seconds:.1f}s (< 60s)")


def test_criterion_05_complexity_scaling():
    start = time.perf_counter()
    sizes = (48, 60, 72, 84, 96)
    _, slopes = complexity_bench(init_state(ModelConfig(), seed=0), sizes, repeats=7, measure_memory=False)
    # the calibration fits have tight windows; extra rounds keep machine jitter out of them
    _, calib = bench_workloads(calibration_workloads(0), sizes, repeats=15, measure_memory=False)
    seconds = time.perf_counter() - start
    ok = (slopes["ssm"] <= 1.3 and slopes["full_attention"] >= 1.7 and 0.9 <= calib["linear"] <= 1.1
          and 1.8 <= calib["quadratic"] <= 2.2 and seconds < 300)
    verdict(5, ok, f"slopes ssm {slopes['ssm']:.3f} (<= 1.3), full attention {slopes['full_attention']:.3f} "
                   f"(>= 1.7), linear {calib['linear']:.3f} ([0.9, 1.1]), quadratic {calib['quadratic']:.3f} "
                   f"([1.8, 2.2]); {seconds:.0f}s (< 300s)")


# --- 6-9: desk-scale training ------------------------------------------------------

@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(**TRAIN_IMAGES), synthetic_corpus(**HELD_OUT)


# SR recipe: a larger step size and a zero output head, so training starts exactly at
# the bilinear baseline (the default 2e-4 gains only about 0.25 dB in 2000 steps)
SR_RECIPE = dict(lr=1e-3)


def _train(task, corpus, zero_head=False, train_kw=None, **model_kw):
    images, held = corpus
    cfg = ModelConfig(task=task, **model_kw)
    tcfg = TrainConfig(**(train_kw or {}))
    state = init_state(cfg, tcfg.seed, identity_head=zero_head)
    report, state = train(cfg, tcfg, images, eval_images=held, state=state)
    return report, state, tcfg


@pytest.fixture(scope="session")
def denoise_run(corpus):
    return _train("denoise", corpus)


@pytest.mark.slow
def test_criterion_06_denoising_learns(denoise_run):
    report, _, _ = denoise_run
    ok = report.gain >= 3.0
    verdict(6, ok, f"held-out Y-PSNR {report.psnr:.3f} dB vs noisy {report.baseline_psnr:.3f} dB, "
                   f"gain {report.gain:+.3f} dB (>= 3); {report.steps} steps in {report.seconds:.0f}s")


@pytest.mark.slow
def test_criterion_07_sr_learns(corpus):
    report, _, _ = _train("sr2", corpus, zero_head=True, train_kw=SR_RECIPE)
    ok = report.gain >= 0.5
    verdict(7, ok, f"held-out Y-PSNR {report.psnr:.3f} dB vs bilinear {report.baseline_psnr:.3f} dB, "
                   f"gain {report.gain:+.3f} dB (>= 0.5); {report.steps} steps in {report.seconds:.0f}s")


@pytest.mark.slow
def test_criterion_08_ablations_train(corpus, denoise_run, tmp_path_factory):
    rows = [("full model", denoise_run[0])]
    errors = []
    for name, flags in ABLATIONS.items():
        try:
            rows.append((name, _train("denoise", corpus, **flags)[0]))
        except Exception as exc:  # recorded, then reported as a failure
            errors.append(f"{name}: {exc!r}")
    table = ["variant,psnr_y,ssim_y,gain_db,seconds"]
    table += [f"{n},{r.psnr:.4f},{r.ssim:.4f},{r.gain:.4f},{r.seconds:.0f}" for n, r in rows]
    path = tmp_path_factory.mktemp("ablation") / "ablation.csv"
    path.write_text("\n".join(table) + "\n")
    ACCEPTANCE_LINES.extend(["  " + line for line in table])
    ok = not errors and all(np.isfinite(r.psnr) for _, r in rows)
    verdict(8, ok, f"{len(rows) - 1}/{len(ABLATIONS)} ablations trained; table written to {path}"
                   + (f"; errors: {errors}" if errors else ""))


@pytest.mark.slow
def test_criterion_09_self_ensemble(corpus, denoise_run):
    _, state, tcfg = denoise_run
    held = corpus[1]
    single = evaluate(state, held, tcfg)
    ensemble = evaluate(state, held, tcfg, ensemble=True)
    ok = ensemble.psnr >= single.psnr - 0.01
    verdict(9, ok, f"ensemble Y-PSNR {ensemble.psnr:.4f} dB vs single pass {single.psnr:.4f} dB "
                   f"(>= single - 0.01)")


# --- 10: metric sanity -------------------------------------------------------------

def test_criterion_10_metric_sanity():
    psnr = psnr_from_mse(1.0)
    x = np.random.default_rng(10).random((24, 24, 3))
    ssim = ssim_y(x, x)
    white = float(rgb_to_y(np.ones(3)))
    ok = abs(psnr - 48.1308) <= 1e-3 and ssim == 1.0 and abs(white - 235.0) <= 1e-3
    verdict(10, ok, f"PSNR(MSE=1) {psnr:.4f} dB, SSIM(x, x) {ssim}, white Y {white:.4f}")

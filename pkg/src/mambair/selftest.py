"""Built-in equivalence and property checks, runnable without pytest."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blocks import ModelConfig, expected_param_count, init_state, mambair_forward
from .gradcheck import check_gradients
from .pipeline.checkpoint import decode_checkpoint, encode_checkpoint
from .pipeline.data import compose_codes, dihedral, inverse_code
from .pipeline.imageio import decode_image, encode_image
from .pipeline.metrics import psnr_from_mse, rgb_to_y, ssim_y
from .pipeline.train import self_ensemble_infer
from .ssm import (LtiParams, SelectiveParams, discretize_zoh, selective_scan, selective_scan_parallel,
                  selective_scan_sequential, ssm_convolutional, ssm_recurrent)
from .tensor import Tensor, pixel_shuffle, space_to_depth


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# --- random instances (shared with the test-suite) ----------------------------

def random_lti(rng: np.random.Generator, max_state: int = 8, max_len: int = 64):
    """A stable diagonal LTI system, a step size and an input sequence."""
    N = int(rng.integers(1, max_state + 1))
    L = int(rng.integers(1, max_len + 1))
    params = LtiParams(-rng.uniform(0.05, 2.0, N), rng.normal(size=N), rng.normal(size=N), float(rng.normal()))
    return params, float(rng.uniform(0.01, 0.5)), rng.normal(size=L)


def random_selective(rng: np.random.Generator, max_state: int = 8, max_len: int = 64, max_channels: int = 4):
    """Per-token selective parameters with softplus-range steps, plus inputs."""
    N = int(rng.integers(1, max_state + 1))
    L = int(rng.integers(1, max_len + 1))
    Cd = int(rng.integers(1, max_channels + 1))
    sel = SelectiveParams(a_log=rng.normal(scale=0.5, size=(Cd, N)),
                          delta=np.log1p(np.exp(rng.normal(-2.0, 1.0, (L, Cd)))),
                          B=rng.normal(size=(L, N)), C=rng.normal(size=(L, N)), D=rng.normal(size=Cd))
    return sel, rng.normal(size=(L, Cd))


# --- checks -------------------------------------------------------------------

def check_lti_forms(count: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        params, delta, x = random_lti(rng)
        rec = ssm_recurrent(discretize_zoh(params, delta), params.C, params.D, x)
        conv = ssm_convolutional(params, delta, x)
        worst = max(worst, float(np.max(np.abs(rec - conv))))
    return worst <= 1e-10, f"max |recurrent - convolutional| = {worst:.3e} over {count} systems"


def check_scan_equivalence(count: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    identical = True
    for _ in range(count):
        sel, x = random_selective(rng)
        seq = selective_scan_sequential(sel, x)
        par = selective_scan_parallel(sel, x)
        worst = max(worst, float(np.max(np.abs(seq - par))))
        identical &= np.array_equal(par, selective_scan_parallel(sel, x))
        identical &= np.array_equal(par, selective_scan_parallel(sel, x, workers=3))
    ok = worst <= 1e-12 and identical
    return ok, f"max |parallel - sequential| = {worst:.3e}; repeat/worker bit-identical: {identical}"


def check_scan_impls(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        sel, x = random_selective(rng)
        args = (x, sel.delta, sel.A, sel.B, sel.C, sel.D)
        ref = selective_scan_sequential(sel, x)
        for impl in ("fused", "parallel"):
            worst = max(worst, float(np.max(np.abs(selective_scan(*args, impl=impl).data - ref))))
    return worst <= 1e-12, f"max |impl - reference| = {worst:.3e}"


def check_zoh_example() -> tuple[bool, str]:
    disc = discretize_zoh(LtiParams([-1.0], [1.0], [1.0]), 0.1)
    ok = abs(disc.A_bar[0] - 0.9048374) < 1e-7 and abs(disc.B_bar[0] - 0.0951626) < 1e-7
    return ok, f"A_bar={disc.A_bar[0]:.7f} B_bar={disc.B_bar[0]:.7f}"


def check_scan_gradients(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    sel, x = random_selective(rng, max_state=3, max_len=8, max_channels=2)
    tensors = {"x": Tensor(x), "delta": Tensor(sel.delta), "A": Tensor(sel.A), "B": Tensor(sel.B),
               "C": Tensor(sel.C), "D": Tensor(sel.D)}
    weights = rng.normal(size=x.shape)

    def fn():
        y = selective_scan(*(tensors[k] for k in ("x", "delta", "A", "B", "C", "D")))
        return (y * weights).sum()

    rep = check_gradients(fn, tensors)
    return rep["max_rel_error"] <= 1e-4, f"max relative error {rep['max_rel_error']:.2e} over {rep['count']}"


def check_pixel_shuffle(seed: int = 0) -> tuple[bool, str]:
    x = np.random.default_rng(seed).normal(size=(4, 6, 8))
    ok = np.array_equal(pixel_shuffle(space_to_depth(Tensor(x), 2), 2).data, x)
    return ok, "pixel_shuffle(space_to_depth(x)) == x"


def check_dihedral(seed: int = 0) -> tuple[bool, str]:
    x = np.random.default_rng(seed).normal(size=(5, 5, 2))
    ok = all(np.array_equal(dihedral(dihedral(x, c), inverse_code(c)), x) for c in range(8))
    ok &= all(np.array_equal(dihedral(dihedral(x, b), a), dihedral(x, compose_codes(a, b)))
              for a in range(8) for b in range(8))
    ok &= np.allclose(self_ensemble_infer(lambda z: z, x), x, atol=1e-15, rtol=0)
    return bool(ok), "inverses, composition table and identity ensemble"


def check_identity_model(seed: int = 0) -> tuple[bool, str]:
    cfg = ModelConfig(channels=8, groups=1, blocks_per_group=1, state=4, ca_reduction=4, bottleneck=2)
    state = init_state(cfg, seed, identity_head=True)
    x = np.random.default_rng(seed).random((8, 8, 3))
    ok = np.array_equal(mambair_forward(Tensor(x), state).data, x)
    ok &= state.num_params() == expected_param_count(cfg)
    return bool(ok), "zero head reproduces the input; parameter count matches closed form"


def check_checkpoint(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(size=(3, 2)).astype(np.float32), "s": np.float32(1.5)}
    opt = {"m.w": np.zeros((3, 2), np.float32), "step": np.float32(7)}
    p2, o2, text = decode_checkpoint(encode_checkpoint(params, opt, "task = denoise\n"))
    ok = all(np.array_equal(p2[k], params[k]) for k in params) and float(o2["step"]) == 7.0
    return ok and text == "task = denoise\n", "encode/decode round trip"


def check_image_codec(seed: int = 0) -> tuple[bool, str]:
    img = np.random.default_rng(seed).integers(0, 256, (3, 4, 3)) / 255.0
    gray = img[..., :1]
    ok = np.array_equal(decode_image(encode_image(img)), img)
    ok &= np.array_equal(decode_image(encode_image(gray)), gray)
    return bool(ok), "PPM/PGM round trip"


def check_metrics() -> tuple[bool, str]:
    p = psnr_from_mse(1.0)
    y = float(rgb_to_y(np.ones(3)))
    x = np.random.default_rng(0).random((16, 16, 3))
    ok = abs(p - 48.1308) <= 1e-3 and abs(y - 235.0) <= 1e-3 and ssim_y(x, x) == 1.0
    return ok, f"PSNR(mse=1)={p:.4f} Y(white)={y:.3f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "lti_recurrent_vs_convolutional": check_lti_forms,
    "selective_parallel_vs_sequential": check_scan_equivalence,
    "scan_impls_match_reference": check_scan_impls,
    "zoh_discretization_example": check_zoh_example,
    "selective_scan_gradients": check_scan_gradients,
    "pixel_shuffle_bijection": check_pixel_shuffle,
    "dihedral_group": check_dihedral,
    "identity_initialized_model": check_identity_model,
    "checkpoint_round_trip": check_checkpoint,
    "image_codec_round_trip": check_image_codec,
    "metric_sanity": check_metrics,
}


def run_selftest(names=None, printer: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        start = time.perf_counter()
        try:
            passed, detail = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(passed), detail, time.perf_counter() - start)
        results.append(res)
        if printer:
            printer(f"{'PASS' if res.passed else 'FAIL'}  {name}: {detail} ({res.seconds:.2f}s)")
    return results


def all_passed(results) -> bool:
    return bool(results) and all(r.passed for r in results)

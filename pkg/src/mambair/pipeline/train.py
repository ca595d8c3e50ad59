"""Training loop, evaluation and self-ensemble inference."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..blocks import ModelConfig, ModelState, init_state, mambair_forward
from ..tensor import Tape, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, build_configs, config_text, parse_config_text
from .data import augment, bilinear_upsample, degrade, dihedral, inverse_code, random_patch
from .imageio import image_read, list_images
from .losses import loss_charbonnier, loss_l1
from .metrics import psnr_y, ssim_y
from .optim import AdamState, adam_step, lr_at

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003


class NumericError(RuntimeError):
    """Raised when a loss or output stops being finite."""


@dataclass
class MetricReport:
    psnr: float = math.nan
    ssim: float = math.nan
    baseline_psnr: float = math.nan
    baseline_ssim: float = math.nan
    losses: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def gain(self) -> float:
        return self.psnr - self.baseline_psnr


# --- batches ----------------------------------------------------------------

def sample_batch(images: list, tcfg: TrainConfig, task: str, step: int):
    """(lq, hq) batch for ``step``; depends only on (seed, step) so runs can resume."""
    rng = np.random.default_rng([tcfg.seed, step])
    scale = 1 if task == "denoise" else int(task[2:])
    size = min(tcfg.patch_for(task), *(min(im.shape[:2]) for im in images))
    size -= size % scale
    patches = []
    for _ in range(tcfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        patches.append(augment(random_patch(img, size, rng), int(rng.integers(8))))
    hq = np.stack(patches)
    return degrade(hq, task, rng, tcfg.sigma), hq


def _loss(task: str, tcfg: TrainConfig):
    if task == "denoise":
        return lambda p, t: loss_charbonnier(p, t, tcfg.charbonnier_eps)
    return loss_l1


def adam_to_entries(adam: AdamState) -> dict:
    entries = {f"m.{k}": v for k, v in adam.m.items()}
    entries.update({f"v.{k}": v for k, v in adam.v.items()})
    entries["step"] = np.array(float(adam.step))
    return entries


def adam_from_entries(entries: dict) -> AdamState:
    adam = AdamState(step=int(entries.get("step", 0)))
    for key, value in entries.items():
        if key.startswith("m."):
            adam.m[key[2:]] = value
        elif key.startswith("v."):
            adam.v[key[2:]] = value
    return adam


def state_from_params(config: ModelConfig, params: dict) -> ModelState:
    reference = init_state(config, 0)
    missing = set(reference.params) - set(params)
    extra = set(params) - set(reference.params)
    if missing or extra:
        raise ValueError(f"checkpoint does not match config (missing {sorted(missing)[:3]}, "
                         f"unexpected {sorted(extra)[:3]})")
    for name, p in reference.items():
        if params[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {p.shape}")
        p.data[...] = params[name]
    return reference


def f32_round(state: ModelState) -> ModelState:
    for p in state.params.values():
        p.data[...] = p.data.astype(np.float32)
    return state


def train_step(state: ModelState, adam: AdamState, lq, hq, tcfg: TrainConfig, step: int) -> float:
    cfg = state.config
    state.requires_grad_(True)
    state.zero_grad()
    with Tape() as tape:
        out = mambair_forward(Tensor(lq), state)
        loss = _loss(cfg.task, tcfg)(out, Tensor(hq))
    value = loss.item()
    if not math.isfinite(value):
        tape.clear()
        raise NumericError(f"non-finite loss {value} at step {step}")
    backward(loss)
    tape.clear()
    grads = {k: p.grad for k, p in state.items()}
    lr = lr_at(step, tcfg.lr, tcfg.total_steps, tcfg.milestones)
    adam_step(state.params, grads, adam, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, f32_state=True)
    return value


def fit(state: ModelState, tcfg: TrainConfig, images: list, adam: AdamState | None = None,
        eval_images: list | None = None, log_path: str | None = None, checkpoint_path: str | None = None,
        callback: Callable | None = None) -> tuple[AdamState, list]:
    """Run the optimizer from ``adam.step`` up to ``tcfg.total_steps``."""
    if not images:
        raise ValueError("no training images")
    adam = adam or AdamState()
    f32_round(state)
    task = state.config.task
    losses = []
    writer = None
    fh = None
    if log_path:
        fh = open(log_path, "a" if adam.step else "w", newline="")
        writer = csv.writer(fh)
        if not adam.step:
            writer.writerow(["step", "loss", "psnr", "ssim"])
    try:
        for step in range(adam.step, tcfg.total_steps):
            lq, hq = sample_batch(images, tcfg, task, step)
            loss = train_step(state, adam, lq, hq, tcfg, step)
            losses.append(loss)
            row = [step + 1, repr(loss), "", ""]
            if eval_images and tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
                rep = evaluate(state, eval_images, tcfg)
                row[2:] = [f"{rep.psnr:.6f}", f"{rep.ssim:.6f}"]
                log.info("step %d loss %.5f psnr %.3f", step + 1, loss, rep.psnr)
            if writer:
                writer.writerow(row)
            if checkpoint_path and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                save_state(checkpoint_path, state, adam, tcfg)
            if callback:
                callback(step, loss)
    finally:
        if fh:
            fh.close()
    state.requires_grad_(False)
    state.zero_grad()
    return adam, losses


def run_model(state: ModelState, lq) -> np.ndarray:
    out = mambair_forward(Tensor(lq), state).data
    if not np.all(np.isfinite(out)):
        raise NumericError("model produced non-finite output")
    return out


def self_ensemble_infer(model: Callable, lq) -> np.ndarray:
    """Average of model outputs over the 8 dihedral transforms, each mapped back."""
    lq = np.asarray(getattr(lq, "data", lq), dtype=np.float64)
    total = None
    for code in range(8):
        out = np.asarray(model(dihedral(lq, code)))
        out = dihedral(out, inverse_code(code))
        total = out if total is None else total + out
    return total / 8.0


def eval_pairs(images: list, tcfg: TrainConfig, task: str, seed: int | None = None):
    """Deterministic (lq, hq) pairs for held-out images."""
    seed = tcfg.seed if seed is None else seed
    pairs = []
    for i, hq in enumerate(images):
        rng = np.random.default_rng([seed + EVAL_SEED_OFFSET, i])
        pairs.append((degrade(hq, task, rng, tcfg.sigma), hq))
    return pairs


def baseline(lq: np.ndarray, task: str) -> np.ndarray:
    if task == "denoise":
        return lq
    return bilinear_upsample(lq, int(task[2:]))


def evaluate(state: ModelState, images: list, tcfg: TrainConfig, ensemble: bool = False,
             seed: int | None = None) -> MetricReport:
    task = state.config.task
    rep = MetricReport()
    scores = {"psnr": [], "ssim": [], "baseline_psnr": [], "baseline_ssim": []}
    model = (lambda x: run_model(state, x))
    for lq, hq in eval_pairs(images, tcfg, task, seed):
        out = self_ensemble_infer(model, lq) if ensemble else model(lq)
        out = np.clip(out, 0.0, 1.0)
        base = np.clip(baseline(lq, task), 0.0, 1.0)
        scores["psnr"].append(psnr_y(out, hq))
        scores["ssim"].append(ssim_y(out, hq))
        scores["baseline_psnr"].append(psnr_y(base, hq))
        scores["baseline_ssim"].append(ssim_y(base, hq))
    for key, values in scores.items():
        setattr(rep, key, float(np.mean(values)))
    rep.extra["per_image_psnr"] = scores["psnr"]
    return rep


# --- persistence --------------------------------------------------------------

def save_state(path: str, state: ModelState, adam: AdamState | None, tcfg: TrainConfig | None) -> None:
    save_checkpoint(path, {k: p.data for k, p in state.items()},
                    adam_to_entries(adam) if adam is not None else {},
                    config_text(state.config, tcfg))


def load_state(path: str) -> tuple[ModelState, AdamState, TrainConfig]:
    params, opt, text = load_checkpoint(path)
    model_cfg, tcfg = build_configs(parse_config_text(text))
    return state_from_params(model_cfg, params), adam_from_entries(opt), tcfg


def load_images(data_dir: str) -> list[np.ndarray]:
    paths = list_images(data_dir)
    if not paths:
        raise FileNotFoundError(f"no PGM/PPM images in {data_dir}")
    return [image_read(p) for p in paths]


def train(model_cfg: ModelConfig, tcfg: TrainConfig, data_dir: str | list, out_checkpoint: str | None = None,
          log_path: str | None = None, eval_images: list | None = None, resume: str | None = None,
          state: ModelState | None = None) -> tuple[MetricReport, ModelState]:
    """Train from HQ images (a directory of PGM/PPM files or a list of arrays)."""
    images = load_images(data_dir) if isinstance(data_dir, (str, os.PathLike)) else list(data_dir)
    if not images:
        raise ValueError("no training images")
    adam = None
    if resume:
        state, adam, _ = load_state(resume)
    elif state is None:
        state = init_state(model_cfg, tcfg.seed)
    start = time.perf_counter()
    adam, losses = fit(state, tcfg, images, adam, eval_images, log_path, out_checkpoint)
    rep = evaluate(state, eval_images, tcfg) if eval_images else MetricReport()
    rep.losses = losses
    rep.steps = adam.step
    rep.seconds = time.perf_counter() - start
    if out_checkpoint:
        save_state(out_checkpoint, state, adam, tcfg)
    return rep, state

"""Shared noise-prediction training machinery.

Every trainer follows the same recipe: draw a batch of (image, mask, prompt)
tuples, diffuse the clean images to per-sample timesteps, run the denoiser
and regress the predicted noise on the true noise.  Prompts are dropped with
a small probability so the unconditional branch used by guidance is trained
too.  Which parameters move is decided purely by the trainable-name list;
frozen tensors never enter the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vocab
from .autodiff import ContractError, Tape, grads_for, mse
from .backbone import AdapterInputs, Denoiser, DenoiserConfig, bind_params, pad_prompt
from .checkpoint import ParameterStore
from .diffusion import NoiseSchedule
from .optim import AdamW
from .rng import Stream, derive_key


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    prompt_dropout: float = 0.1


def prompt_batch(prompts: list[list[int]], max_prompt: int) -> np.ndarray:
    return np.stack([pad_prompt(p, max_prompt) for p in prompts])


def empty_prompts(batch: int, max_prompt: int) -> np.ndarray:
    return np.full((batch, max_prompt), vocab.PAD_ID, dtype=np.int64)


def diffuse_batch(images: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    ab = np.array([schedule.alpha_bar_at(int(t)) for t in ts])[:, None, None, None]
    return np.sqrt(ab) * images + np.sqrt(1.0 - ab) * eps


def assemble_inpaint_batch(records, indices, schedule: NoiseSchedule,
                           den_cfg: DenoiserConfig, step_key: int,
                           prompt_dropout: float):
    """Batch tensors for one training step over full-scene records."""
    rs = Stream(derive_key(step_key, "draw"), lanes=1024)
    batch = len(indices)
    images = np.stack([records[i].image for i in indices])
    masks = np.stack([records[i].mask for i in indices])
    prompts = []
    for k, i in enumerate(indices):
        ids = records[i].prompt
        if rs.uniform(1)[0] < prompt_dropout:
            ids = []
        prompts.append(ids)
    ts = 1 + rs.randints(batch, schedule.T)
    eps = rs.normal(images.shape)
    y_t = diffuse_batch(images, ts, eps, schedule)
    masked = images * (1.0 - masks)[:, None]
    return y_t, ts, prompt_batch(prompts, den_cfg.max_prompt), masks, masked, eps


def run_training(store: ParameterStore, trainable: list[str], records,
                 den_cfg: DenoiserConfig, schedule: NoiseSchedule,
                 cfg: TrainConfig, seed: int,
                 batch_builder=None, adapter_builder=None) -> list[float]:
    """Generic optimization loop; returns the per-step loss history.

    ``batch_builder(step_key, indices)`` may replace the default scene batch;
    ``adapter_builder(params)`` may produce AdapterInputs from bound params
    (used by the stage trainers to route adapter weights into the forward).
    """
    if not records:
        raise ContractError("training needs a nonempty dataset")
    for name in trainable:
        if store.is_frozen(name):
            raise ContractError(f"trainable tensor {name} is marked frozen")
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[float] = []
    for step in range(cfg.steps):
        step_key = derive_key(seed, "train_step", step)
        idx = Stream(derive_key(step_key, "batch")).randints(cfg.batch_size, len(records))
        if batch_builder is None:
            y_t, ts, prompts, masks, masked, eps = assemble_inpaint_batch(
                records, idx, schedule, den_cfg, step_key, cfg.prompt_dropout)
            adapters_extra = None
        else:
            y_t, ts, prompts, masks, masked, eps, adapters_extra = batch_builder(step_key, idx)
        tape = Tape()
        params = bind_params(store, tape, trainable)
        adapters = adapter_builder(params, adapters_extra) if adapter_builder else AdapterInputs()
        model = Denoiser(den_cfg, params)
        eps_hat = model.forward(y_t, ts, prompts, masks, masked, adapters=adapters)
        loss = mse(eps_hat, eps)
        grads = grads_for(tape, loss, {n: params[n] for n in trainable})
        opt.step(store, grads)
        history.append(float(loss.data))
    return history


def moving_average(xs: list[float], window: int) -> list[float]:
    if window < 1 or window > len(xs):
        return []
    c = np.cumsum([0.0] + list(xs))
    return list((c[window:] - c[:-window]) / window)

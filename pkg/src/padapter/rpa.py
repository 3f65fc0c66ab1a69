"""Reference-patch adapter: cross-patch attention for stage-2 refinement.

For each target patch, features of a reference patch are captured from the
attention-layer outputs of the stage-1 model (one conditioned pass at a fixed
mid-schedule timestep) and re-projected by two trainable d x d matrices per
layer into keys and values the target's queries attend to.  With the value
projection at zero the residual vanishes, so RPA starts as an exact no-op on
the stage-1 pipeline.

Reference selection follows the embedding argmax rule: the candidate patch
whose embedding has the highest cosine similarity with the stage-1 output
patch wins, self excluded, ties to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import embedder
from .autodiff import ContractError, matmul, add, reshape, value
from .backbone import AdapterInputs, Denoiser, DenoiserConfig, multihead_attention
from .checkpoint import ParameterStore
from .diffusion import NoiseSchedule, forward_diffuse
from .rng import Stream, derive_key
from .training import prompt_batch


@dataclass
class ReferenceFeatures:
    """Per adapted layer, the captured (N_r, d) attention output."""
    layers: dict[int, np.ndarray]
    source_index: int = -1

    def batched(self, batch: int) -> dict[int, np.ndarray]:
        return {l: np.repeat(z[None], batch, axis=0) for l, z in self.layers.items()}


def rpa_residual(q, rpa_w: dict, z_ref, heads: int):
    """Attention from target queries to reference-projected keys/values."""
    if z_ref is None:
        raise ContractError("reference features missing for this layer")
    k = matmul(z_ref, rpa_w["wk"])
    v = matmul(z_ref, rpa_w["wv"])
    return multihead_attention(q, k, v, heads)


def rpa_forward(z, c, token_mask, base_w: dict, dca_w: dict | None,
                z_ref, rpa_w: dict, heads: int = 1):
    """Full stage-2 attention for one layer: the (optionally DCA-augmented)
    base attention plus the reference residual.  Accepts (N, d) or batched."""
    from .dca import dca_forward, dca_residual

    single = value(z).ndim == 2
    zz = reshape(z, (1,) + value(z).shape) if single else z
    cc = reshape(c, (1,) + value(c).shape) if single else c
    zr = z_ref
    if value(z_ref).ndim == 2:
        zr = reshape(z_ref, (1,) + value(z_ref).shape)
    q = matmul(zz, base_w["wq"])
    k = matmul(cc, base_w["wk"])
    v = matmul(cc, base_w["wv"])
    base = multihead_attention(q, k, v, heads)
    if dca_w is not None:
        if token_mask is None:
            raise ContractError("DCA-augmented path needs the token mask")
        m = np.asarray(token_mask, dtype=np.float64)
        m = m.reshape(1, -1) if single else m.reshape(value(zz).shape[0], -1)
        base = add(base, dca_residual(zz, q, k, v, m, dca_w, heads))
    out = add(base, rpa_residual(q, rpa_w, zr, heads))
    if single:
        out = reshape(out, value(out).shape[1:])
    return out


def init_rpa_params(config: DenoiserConfig, seed: int) -> ParameterStore:
    """Small-Gaussian key projection, zero value projection (exact no-op)."""
    store = ParameterStore()
    rs = Stream(derive_key(seed, "rpa_init"), lanes=64)
    d = config.dim
    for i in config.adapted():
        store.put(f"rpa.l{i}.wk", rs.normal((d, d)) * 0.02)
        store.put(f"rpa.l{i}.wv", np.zeros((d, d)))
    return store


def init_ctrl_params(config: DenoiserConfig, seed: int) -> ParameterStore:
    """Zero-initialized per-layer control projections."""
    store = ParameterStore()
    for i in range(config.layers):
        store.put(f"ctrl.l{i}.proj", np.zeros((config.cell_out, config.dim)))
    return store


def extract_reference_features(patch: np.ndarray, mask: np.ndarray,
                               prompt_ids: list[int], store: ParameterStore,
                               den_cfg: DenoiserConfig, schedule: NoiseSchedule,
                               noise_key: int, t_ref: int | None = None,
                               source_index: int = -1) -> ReferenceFeatures:
    """One conditioned stage-1 forward at timestep t_ref, capturing each
    adapted layer's cross-attention output as the reference features."""
    dca_names = store.names("dca.")
    if not dca_names:
        raise ContractError("reference extraction needs a stage-1 (DCA) model")
    if t_ref is None:
        t_ref = schedule.T // 2
    eps = Stream(derive_key(noise_key, "refnoise"), lanes=256).normal(patch.shape)
    y_t = forward_diffuse(patch, t_ref, eps, schedule)
    params = {n: store.get(n) for n in store.names()}
    model = Denoiser(den_cfg, params)
    capture: dict = {}
    adapters = AdapterInputs(dca={n: params[n] for n in dca_names})
    model.forward(y_t[None], t_ref, prompt_batch([list(prompt_ids)], den_cfg.max_prompt),
                  mask[None], (patch * (1.0 - mask)[None])[None],
                  adapters=adapters, capture=capture)
    layers = {i: capture[f"cross_attn.{i}"][0] for i in den_cfg.adapted()}
    return ReferenceFeatures(layers=layers, source_index=source_index)


def select_reference(y_i: np.ndarray, candidates: list[np.ndarray],
                     self_index: int) -> int:
    """Index of the candidate maximizing cosine similarity with ``y_i`` in
    embedding space, skipping ``self_index``; ties go to the lowest index."""
    if len(candidates) - (0 <= self_index < len(candidates)) < 1:
        raise ContractError("reference selection needs at least one other candidate")
    e_target = embedder.embed_image(y_i)
    best_idx, best_sim = -1, -np.inf
    for l, cand in enumerate(candidates):
        if l == self_index:
            continue
        sim = embedder.cosine_sim(e_target, embedder.embed_image(cand))
        if sim > best_sim:
            best_idx, best_sim = l, sim
    return best_idx


# ---------------------------------------------------------------------------
# stage-2 training
# ---------------------------------------------------------------------------

@dataclass
class PatchPairSample:
    """One degraded-target / clean-reference training unit."""
    target: np.ndarray            # (C, n, n) clean target patch
    mask: np.ndarray              # (n, n)
    control: np.ndarray           # (C, n, n) degraded stand-in for the
                                  # upsampled stage-1 output
    prompt: list[int]
    refs: ReferenceFeatures


def train_stage2(stage1: ParameterStore, samples: list[PatchPairSample],
                 den_cfg: DenoiserConfig, schedule: NoiseSchedule,
                 train_cfg, seed: int):
    """Fit RPA and the control branch with base + DCA frozen.

    Returns (rpa+ctrl ParameterStore, loss history).
    """
    from .training import TrainConfig, run_training

    for prefix in ("base.", "dca."):
        names = stage1.names(prefix)
        if not names:
            raise ContractError(f"stage-2 training needs {prefix}* weights")
        for name in names:
            if not stage1.is_frozen(name):
                raise ContractError(f"{name} must be frozen for stage-2 training")
    store = stage1.copy()
    store.merge(init_rpa_params(den_cfg, seed))
    store.merge(init_ctrl_params(den_cfg, seed))
    trainable = store.names("rpa.") + store.names("ctrl.")
    before_base = store.frozen_hash("base.")
    before_dca = store.frozen_hash("dca.")
    dca_names = store.names("dca.")

    def batch_builder(step_key: int, idx):
        rs = Stream(derive_key(step_key, "draw"), lanes=1024)
        batch = len(idx)
        images = np.stack([samples[i].target for i in idx])
        masks = np.stack([samples[i].mask for i in idx])
        controls = np.stack([samples[i].control for i in idx])
        prompts = []
        for i in idx:
            ids = samples[i].prompt
            if rs.uniform(1)[0] < train_cfg.prompt_dropout:
                ids = []
            prompts.append(ids)
        ts = 1 + rs.randints(batch, schedule.T)
        eps = rs.normal(images.shape)
        from .training import diffuse_batch
        y_t = diffuse_batch(images, ts, eps, schedule)
        masked = images * (1.0 - masks)[:, None]
        refs = {l: np.stack([samples[i].refs.layers[l] for i in idx])
                for l in den_cfg.adapted()}
        extra = {"refs": refs, "ctrl_image": controls}
        return (y_t, ts, prompt_batch(prompts, den_cfg.max_prompt),
                masks, masked, eps, extra)

    def adapter_builder(params, extra):
        return AdapterInputs(
            dca={n: params[n] for n in dca_names},
            rpa={n: params[n] for n in store.names("rpa.")},
            refs=extra["refs"],
            ctrl={n: params[n] for n in store.names("ctrl.")},
            ctrl_image=extra["ctrl_image"])

    history = run_training(store, trainable, samples, den_cfg, schedule,
                           train_cfg, seed, batch_builder=batch_builder,
                           adapter_builder=adapter_builder)
    if store.frozen_hash("base.") != before_base or store.frozen_hash("dca.") != before_dca:
        raise ContractError("frozen weights changed during stage-2 training")
    out = store.subset("rpa.")
    out.merge(store.subset("ctrl."))
    return out, history

"""End-to-end two-stage inpainting orchestration.

The full pipeline downsamples the task to the backbone's working resolution,
runs the stage-1 (dual-context) sampler with per-step blending, upsamples the
result, tiles the native-resolution task into patches and refines each masked
patch with the stage-2 model: reference features from the best-matching other
patch, control features from the upsampled stage-1 crop, and blending every
step.  Patches are independent - each derives its noise streams from
(task seed, patch index) - so any processing order, including concurrent
execution, yields the same bytes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rpa as rpa_mod
from .autodiff import ContractError, value
from .backbone import AdapterInputs, Denoiser, DenoiserConfig
from .checkpoint import ParameterStore
from .diffusion import NoiseSchedule, SamplerConfig, cfg_combine, sample_inpaint
from .imageops import downsample, downsample_mask, upsample
from .rng import derive_key
from .tiling import GeometryError, PatchGrid, assemble, split
from .training import empty_prompts, prompt_batch


@dataclass
class InpaintTask:
    masked_image: np.ndarray                 # (C, H, W), holes zeroed
    mask: np.ndarray                         # (H, W) binary, 1 = hole
    prompt: list[int]                        # global prompt token ids
    patch_prompts: dict[int, list[int]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.mask.shape != self.masked_image.shape[-2:]:
            raise ContractError(
                f"mask {self.mask.shape} does not match image "
                f"{self.masked_image.shape}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ContractError("task mask must be strictly binary")


@dataclass
class StageOneResult:
    y: np.ndarray                            # base-resolution inpainted image
    patches: list[np.ndarray]                # upsampled result cut to patches


@dataclass
class ModelBundle:
    """Merged parameter store plus the shapes and schedule it was built for."""
    store: ParameterStore
    config: DenoiserConfig
    schedule: NoiseSchedule

    def has(self, prefix: str) -> bool:
        return bool(self.store.names(prefix))


@dataclass
class PipelineConfig:
    patch_h: int = 64
    patch_w: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    use_dca: bool = True
    use_rpa: bool = True
    use_ctrl: bool = True
    t_ref: int | None = None                 # reference extraction timestep
    jobs: int = 1


def control_features(y_patch: np.ndarray, ctrl_store: ParameterStore,
                     config: DenoiserConfig) -> list[np.ndarray]:
    """Per-layer control features: zero-init linear projections of the
    tokenized stage-1 patch.  All-zero until the control branch trains."""
    from .backbone import image_to_cells
    if y_patch.shape[0] != config.channels:
        raise ContractError(f"control patch channels {y_patch.shape} do not "
                            f"match config C={config.channels}")
    cells = image_to_cells(y_patch[None], config.token_size)[0]
    return [cells @ ctrl_store.get(f"ctrl.l{i}.proj") for i in range(config.layers)]


def make_predictor(bundle: ModelBundle, prompt: list[int], mask: np.ndarray,
                   masked_image: np.ndarray, sampler: SamplerConfig,
                   use_dca: bool, rpa_refs=None, ctrl_image: np.ndarray | None = None):
    """Guided noise predictor for one sampling run.

    Folds classifier-free guidance into a single batched forward (conditional
    and unconditional rows) and returns eps already combined.
    """
    cfg = bundle.config
    params = {n: bundle.store.get(n) for n in bundle.store.names()}
    model = Denoiser(cfg, params)
    dca = {n: params[n] for n in bundle.store.names("dca.")} if use_dca else None
    if use_dca and not dca:
        raise ContractError("predictor requested DCA but the bundle has none")
    rpa_w = refs = None
    if rpa_refs is not None:
        rpa_w = {n: params[n] for n in bundle.store.names("rpa.")}
        if not rpa_w:
            raise ContractError("predictor requested RPA but the bundle has none")
    ctrl = None
    if ctrl_image is not None:
        ctrl = {n: params[n] for n in bundle.store.names("ctrl.")}
        if not ctrl:
            raise ContractError("predictor requested control but the bundle has none")
    guided = sampler.cfg_scale != 1.0
    b = 2 if guided else 1
    prompts_c = prompt_batch([list(prompt)], cfg.max_prompt)
    prompts = np.concatenate([prompts_c, empty_prompts(1, cfg.max_prompt)]) \
        if guided else prompts_c
    mask_b = np.repeat(mask[None], b, axis=0)
    masked_b = np.repeat(masked_image[None], b, axis=0)
    if rpa_refs is not None:
        refs = {l: np.repeat(z[None], b, axis=0) for l, z in rpa_refs.layers.items()}
    ctrl_b = np.repeat(ctrl_image[None], b, axis=0) if ctrl_image is not None else None
    adapters = AdapterInputs(dca=dca, rpa=rpa_w, refs=refs, ctrl=ctrl,
                             ctrl_image=ctrl_b)

    def predict(y: np.ndarray, t: int) -> np.ndarray:
        y_b = np.repeat(y[None], b, axis=0)
        eps = value(model.forward(y_b, t, prompts, mask_b, masked_b, adapters=adapters))
        if guided:
            return cfg_combine(eps[1], eps[0], sampler.cfg_scale)
        return eps[0]

    return predict


def run_stage1(task: InpaintTask, bundle: ModelBundle,
               cfg: PipelineConfig | None = None,
               upsample_factor: int = 1,
               grid: PatchGrid | None = None) -> StageOneResult:
    """Base-resolution inpainting with the dual-context model.

    The task must fit the backbone: dims at most the configured size and
    divisible by the token size.  Unmasked pixels are preserved exactly.
    """
    cfg = cfg or PipelineConfig()
    c, h, w = task.masked_image.shape
    if h > bundle.config.height or w > bundle.config.width:
        raise GeometryError(
            f"stage-1 input {h}x{w} exceeds base resolution "
            f"{bundle.config.height}x{bundle.config.width}")
    predict = make_predictor(bundle, task.prompt, task.mask, task.masked_image,
                             cfg.sampler, use_dca=cfg.use_dca)
    y = sample_inpaint(predict, task.masked_image, task.mask, bundle.schedule,
                       derive_key(task.seed, "stage1"), cfg.sampler)
    y_up = upsample(y, upsample_factor)
    patches = split(y_up, grid) if grid is not None else [y_up]
    return StageOneResult(y=y, patches=patches)


def run_stage2_patch(index: int, masked_patch: np.ndarray, mask_patch: np.ndarray,
                     prompt: list[int], y_patch: np.ndarray,
                     reference: tuple[np.ndarray, np.ndarray, list[int]],
                     bundle: ModelBundle, cfg: PipelineConfig, seed: int) -> np.ndarray:
    """Refine one patch at native resolution.

    ``reference`` is (masked ref patch, ref mask, ref prompt).  Reference
    features are extracted once through the stage-1 model and reused across
    all sampling steps.  Unmasked pixels of the patch are preserved exactly.
    """
    patch_key = derive_key(seed, "patch", index)
    refs = None
    if cfg.use_rpa:
        ref_patch, ref_mask, ref_prompt = reference
        refs = rpa_mod.extract_reference_features(
            ref_patch, ref_mask, ref_prompt, bundle.store, bundle.config,
            bundle.schedule, noise_key=patch_key, t_ref=cfg.t_ref)
    ctrl_image = y_patch if (cfg.use_ctrl and bundle.has("ctrl.")) else None
    predict = make_predictor(bundle, prompt, mask_patch, masked_patch,
                             cfg.sampler, use_dca=cfg.use_dca,
                             rpa_refs=refs, ctrl_image=ctrl_image)
    return sample_inpaint(predict, masked_patch, mask_patch, bundle.schedule,
                          derive_key(patch_key, "stage2"), cfg.sampler)


def run_full_pipeline(task: InpaintTask, bundle: ModelBundle,
                      cfg: PipelineConfig | None = None) -> np.ndarray:
    """Downsample -> stage 1 -> upsample -> split -> per-patch stage 2 ->
    assemble.  Pure function of (task, checkpoints, config, seed)."""
    cfg = cfg or PipelineConfig()
    c, h, w = task.masked_image.shape
    grid = PatchGrid(h, w, cfg.patch_h, cfg.patch_w)
    factor = max(1, -(-h // bundle.config.height), -(-w // bundle.config.width))
    if h % factor or w % factor:
        raise GeometryError(f"image {h}x{w} not divisible by downsample factor {factor}")
    mask_lr = downsample_mask(task.mask, factor)
    x_lr = downsample(task.masked_image, factor) * (1.0 - mask_lr)[None]
    task_lr = InpaintTask(masked_image=x_lr, mask=mask_lr, prompt=task.prompt,
                          seed=task.seed)
    stage1 = run_stage1(task_lr, bundle, cfg, upsample_factor=factor, grid=grid)

    masked_patches = split(task.masked_image, grid)
    mask_patches = split(task.mask, grid)

    def patch_prompt(i: int) -> list[int]:
        return task.patch_prompts.get(i, task.prompt)

    def refine(i: int) -> np.ndarray:
        if not mask_patches[i].any():
            return masked_patches[i]
        ref_idx = rpa_mod.select_reference(stage1.patches[i], masked_patches, i)
        reference = (masked_patches[ref_idx], mask_patches[ref_idx],
                     patch_prompt(ref_idx))
        return run_stage2_patch(i, masked_patches[i], mask_patches[i],
                                patch_prompt(i), stage1.patches[i], reference,
                                bundle, cfg, task.seed)

    indices = list(range(grid.count))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            refined = list(pool.map(refine, indices))
    else:
        refined = [refine(i) for i in indices]
    return assemble(refined, grid)

"""Stage-2 training data: degraded-target / clean-reference patch pairs.

High-resolution scenes are tiled by the stage-2 patch size; for each sampled
target patch a different patch of the same scene serves as the reference.
The target's control input is a degraded copy of the clean patch, standing in
for the upsampled stage-1 output the pipeline feeds at inference time.
Reference features are extracted once per sample through the frozen stage-1
model and cached, since they are constant during training.
"""

from __future__ import annotations

import numpy as np

from . import vocab
from .autodiff import ContractError
from .pipeline import ModelBundle
from .rng import Stream, derive_key
from .rpa import PatchPairSample, extract_reference_features
from .synth import MaskSpec, RANDOM_MASK_KINDS, SceneRecord, degrade, gen_mask, shape_mask
from .tiling import PatchGrid, split


def patch_tokens(rec: SceneRecord, grid: PatchGrid, index: int) -> list[int]:
    """Local prompt of one patch: scene foreground tokens when the object
    overlaps the patch, plus the scene background tokens."""
    fg = []
    if rec.spec.fg is not None:
        seg = shape_mask(rec.spec.fg, grid.height, grid.width)
        y0, x0, y1, x1 = grid.rect(index)
        if seg[y0:y1, x0:x1].any():
            fg = rec.fg
    return vocab.compose_prompt(fg, rec.bg)


def prepare_stage2_samples(records: list[SceneRecord], patch_size: int,
                           bundle: ModelBundle, seed: int,
                           samples_per_item: int = 2) -> list[PatchPairSample]:
    """Build the patch-pair training set from multi-patch scene records."""
    samples: list[PatchPairSample] = []
    for rec in records:
        c, h, w = rec.image.shape if rec.image.ndim == 3 else (1,) + rec.image.shape
        grid = PatchGrid(h, w, patch_size, patch_size)
        if grid.count < 2:
            raise ContractError(
                f"stage-2 data needs at least 2 patches per scene, got {grid.count}")
        patches = split(rec.image, grid)
        for k in range(min(samples_per_item, grid.count)):
            key = derive_key(seed, "stage2_sample", rec.index, k)
            rs = Stream(derive_key(key, "pick"))
            target_idx = rs.randint(grid.count)
            others = [j for j in range(grid.count) if j != target_idx]
            ref_idx = others[rs.randint(len(others))]
            target = patches[target_idx]
            kind = RANDOM_MASK_KINDS[rs.randint(len(RANDOM_MASK_KINDS))]
            mask = gen_mask(MaskSpec(kind=kind, seed=key), patch_size)
            control = degrade(target, derive_key(key, "ctrl"))
            ref_prompt = patch_tokens(rec, grid, ref_idx)
            refs = extract_reference_features(
                patches[ref_idx], np.zeros((patch_size, patch_size)), ref_prompt,
                bundle.store, bundle.config, bundle.schedule,
                noise_key=derive_key(key, "ref"), source_index=ref_idx)
            samples.append(PatchPairSample(
                target=target, mask=mask, control=control,
                prompt=patch_tokens(rec, grid, target_idx), refs=refs))
    return samples

"""Proxy metrics and paired ablation evaluation.

Reconstruction is scored by masked-region MSE/PSNR against the ground-truth
scene, exact unmasked preservation is verified as a max-abs-diff, patch
discontinuity by a boundary-vs-interior seam score, and semantic alignment
by the embedder cosine between the image and its prompt.  Ablations evaluate
two arms on identical (task, seed) pairs and report per-metric medians plus
paired deltas.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import embedder
from .autodiff import ContractError
from .pipeline import (InpaintTask, ModelBundle, PipelineConfig, run_full_pipeline,
                       run_stage1)
from .tiling import PatchGrid


def masked_mse(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over masked pixels only (all channels)."""
    if pred.shape != truth.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if mask.shape != pred.shape[-2:]:
        raise ContractError(f"mask {mask.shape} does not cover {pred.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError("mask must be strictly binary")
    sel = mask == 1.0
    if not sel.any():
        raise ContractError("masked_mse needs a nonempty mask")
    diff = (pred - truth)[..., sel]
    return float((diff * diff).mean())


def masked_psnr(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """PSNR (dB, max = 1.0) over masked pixels; +inf when the error is zero."""
    err = masked_mse(pred, truth, mask)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def unmasked_preservation(pred: np.ndarray, original: np.ndarray,
                          mask: np.ndarray) -> float:
    """Max absolute difference over unmasked pixels; 0 for this pipeline."""
    if pred.shape != original.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {original.shape}")
    sel = mask == 0.0
    if not sel.any():
        return 0.0
    return float(np.abs((pred - original)[..., sel]).max())


def seam_score(image: np.ndarray, grid: PatchGrid) -> float:
    """Boundary-vs-interior discontinuity.

    For each pair orientation, the mean absolute neighbor difference across
    patch boundaries is compared with the mean over interior pairs at the
    same offset; orientations are weighted by their boundary pair counts.
    Zero for constant or globally smooth images, large and positive for
    visible seams.
    """
    if image.shape[-2:] != (grid.height, grid.width):
        raise ContractError(f"image {image.shape} does not match grid")
    img = image if image.ndim == 3 else image[None]
    h, w = grid.height, grid.width

    def pair_diff(a, b):
        return np.abs(a - b).mean(axis=0)

    # horizontal-orientation pairs: (y, x-1) vs (y, x)
    dx = pair_diff(img[:, :, 1:], img[:, :, :-1])           # (H, W-1), pair x-1..x
    xs = np.arange(1, w)
    x_boundary = (xs % grid.patch_w) == 0
    # vertical-orientation pairs
    dy = pair_diff(img[:, 1:, :], img[:, :-1, :])           # (H-1, W)
    ys = np.arange(1, h)
    y_boundary = (ys % grid.patch_h) == 0

    terms = []
    for diffs, boundary in ((dx, x_boundary), (dy.T, y_boundary)):
        nb = int(boundary.sum())
        if nb == 0:
            continue
        b_mean = float(diffs[:, boundary].mean())
        interior = ~boundary
        i_mean = float(diffs[:, interior].mean()) if interior.any() else 0.0
        terms.append((nb * diffs.shape[0], b_mean - i_mean))
    total = sum(n for n, _ in terms)
    if total == 0:
        return 0.0
    return sum(n * t for n, t in terms) / total


def prompt_alignment(image: np.ndarray, prompt_ids: list[int]) -> float:
    """Cosine between the image embedding and the prompt embedding."""
    return embedder.cosine_sim(embedder.embed_image(image),
                               embedder.embed_text(list(prompt_ids)))


# ---------------------------------------------------------------------------
# reports and ablations
# ---------------------------------------------------------------------------

def _json_safe(x):
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


@dataclass
class MetricReport:
    config: dict
    per_image: list[dict] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        if not self.per_image:
            return {}
        out = {}
        for key in self.per_image[0]:
            if key == "index":
                continue
            vals = [rec[key] for rec in self.per_image]
            finite = [v for v in vals if math.isfinite(v)]
            out[f"median_{key}"] = float(np.median(vals)) if finite else math.inf
            out[f"mean_{key}"] = float(np.mean(finite)) if finite else math.inf
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "per_image": self.per_image,
                "aggregates": self.aggregates, "seeds": self.seeds}

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), sort_keys=True, indent=1)


@dataclass
class EvalTask:
    task: InpaintTask
    truth: np.ndarray


@dataclass
class AblationArm:
    name: str
    bundle: ModelBundle
    use_dca: bool = True
    use_rpa: bool = False
    use_ctrl: bool = False


def evaluate_arm(arm: AblationArm, tasks: list[EvalTask], seeds: list[int],
                 pipe_cfg: PipelineConfig, mode: str = "stage1") -> MetricReport:
    """Score one arm over matched (task, seed) pairs.

    mode 'stage1' samples at base resolution; 'pipeline' runs the full
    two-stage pipeline and adds the seam score.
    """
    if len(seeds) != len(tasks):
        raise ContractError(f"{len(tasks)} tasks but {len(seeds)} seeds")
    cfg = PipelineConfig(patch_h=pipe_cfg.patch_h, patch_w=pipe_cfg.patch_w,
                         sampler=pipe_cfg.sampler, use_dca=arm.use_dca,
                         use_rpa=arm.use_rpa, use_ctrl=arm.use_ctrl,
                         t_ref=pipe_cfg.t_ref, jobs=pipe_cfg.jobs)
    report = MetricReport(config={"arm": arm.name, "mode": mode,
                                  "use_dca": arm.use_dca, "use_rpa": arm.use_rpa,
                                  "use_ctrl": arm.use_ctrl,
                                  "steps": cfg.sampler.steps,
                                  "cfg_scale": cfg.sampler.cfg_scale},
                          seeds=list(seeds))
    for k, (et, seed) in enumerate(zip(tasks, seeds)):
        task = InpaintTask(masked_image=et.task.masked_image, mask=et.task.mask,
                           prompt=et.task.prompt,
                           patch_prompts=et.task.patch_prompts, seed=seed)
        if mode == "stage1":
            out = run_stage1(task, arm.bundle, cfg).y
        elif mode == "pipeline":
            out = run_full_pipeline(task, arm.bundle, cfg)
        else:
            raise ContractError(f"unknown evaluation mode {mode!r}")
        rec = {
            "index": k,
            "masked_mse": masked_mse(out, et.truth, task.mask),
            "masked_psnr": masked_psnr(out, et.truth, task.mask),
            "unmasked_maxdiff": unmasked_preservation(out, et.truth, task.mask),
            "prompt_alignment": prompt_alignment(out, task.prompt),
        }
        if mode == "pipeline":
            grid = PatchGrid(out.shape[-2], out.shape[-1], cfg.patch_h, cfg.patch_w)
            rec["seam_score"] = seam_score(out, grid)
        report.per_image.append(rec)
    return report


@dataclass
class AblationResult:
    report_a: MetricReport
    report_b: MetricReport
    deltas: dict

    def to_dict(self) -> dict:
        return {"arm_a": self.report_a.to_dict(), "arm_b": self.report_b.to_dict(),
                "deltas": self.deltas}

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), sort_keys=True, indent=1)


def run_ablation(arm_a: AblationArm, arm_b: AblationArm, tasks: list[EvalTask],
                 seeds: list[int], pipe_cfg: PipelineConfig,
                 mode: str = "stage1") -> AblationResult:
    """Evaluate both arms on identical (task, seed) pairs; deltas are
    arm_b aggregates minus arm_a aggregates."""
    if len(seeds) != len(tasks):
        raise ContractError(f"{len(tasks)} tasks but {len(seeds)} seeds")
    ra = evaluate_arm(arm_a, tasks, seeds, pipe_cfg, mode)
    rb = evaluate_arm(arm_b, tasks, seeds, pipe_cfg, mode)
    deltas = {}
    for key, av in ra.aggregates.items():
        bv = rb.aggregates[key]
        deltas[key] = bv - av if (math.isfinite(av) and math.isfinite(bv)) else math.nan
    return AblationResult(report_a=ra, report_b=rb, deltas=deltas)

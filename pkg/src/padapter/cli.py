"""Command-line surface: dataset generation, pretraining, the two adapter
training stages, inference and ablation evaluation.

Every command validates its inputs, runs the corresponding module pipeline
and writes its outputs plus a JSON run manifest (resolved configuration,
input hashes, output hashes).  Exit codes: 0 success, 1 runtime failure,
2 usage or validation error.  All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm, synth, vocab
from .backbone import DenoiserConfig, pretrain_base
from .checkpoint import (ParameterStore, file_hash, get_meta, load_checkpoint,
                         put_meta, save_checkpoint)
from .dca import train_stage1
from .diffusion import SamplerConfig, make_schedule
from .metrics import AblationArm, EvalTask, run_ablation
from .pipeline import InpaintTask, ModelBundle, PipelineConfig, run_full_pipeline
from .rng import derive_key
from .rpa import train_stage2
from .training import TrainConfig


@dataclass
class RunConfig:
    """Resolved settings echoed into every manifest and report."""
    command: str
    seed: int
    steps: int = 30
    cfg_scale: float = 7.0
    patch: int = 64
    options: dict = field(default_factory=dict)


def _hash_input(path: Path) -> str:
    if path.is_dir():
        manifest = path / "manifest.json"
        return file_hash(manifest) if manifest.exists() else "unhashed-dir"
    return file_hash(path)


def write_manifest(run: RunConfig, inputs: list, outputs: list, out_path: Path) -> None:
    doc = {
        "config": asdict(run),
        "inputs": {str(p): _hash_input(Path(p)) for p in inputs},
        "outputs": {str(p): _hash_input(Path(p)) for p in outputs},
    }
    out_path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _load_bundle(base_path: str, extra: list[str | None]) -> ModelBundle:
    store = load_checkpoint(base_path)
    meta = get_meta(store, "base")
    if meta is None:
        raise ValueError(f"checkpoint {base_path} carries no model metadata")
    for p in extra:
        if p:
            store.merge(load_checkpoint(p))
    store.freeze_all()
    config = DenoiserConfig.from_dict(meta["denoiser"])
    s = meta["schedule"]
    schedule = make_schedule(s["T"], s["beta_start"], s["beta_end"])
    return ModelBundle(store=store, config=config, schedule=schedule)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    synth.build_dataset(args.count, args.size, args.mix, args.seed, out)
    run = RunConfig(command="gen-data", seed=args.seed,
                    options={"count": args.count, "size": args.size, "mix": args.mix,
                             "out": str(out)})
    write_manifest(run, [], [out], out / "run_manifest.json")
    return 0


def _denoiser_config_from_args(args, size: int) -> DenoiserConfig:
    return DenoiserConfig(height=size, width=size, channels=3,
                          token_size=args.token, dim=args.dim,
                          layers=args.layers, heads=args.heads)


def cmd_pretrain(args) -> int:
    records = synth.load_records(args.data)
    size = records[0].image_u8.shape[-1]
    config = _denoiser_config_from_args(args, size)
    schedule = make_schedule(args.timesteps)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr)
    store, history = pretrain_base(records, config, args.steps, args.seed,
                                   schedule=schedule, train_cfg=cfg)
    put_meta(store, "base", {
        "denoiser": config.to_dict(),
        "schedule": {"T": args.timesteps, "beta_start": 0.001, "beta_end": 0.12}})
    save_checkpoint(store, args.out)
    run = RunConfig(command="pretrain", seed=args.seed,
                    options={"data": args.data, "steps": args.steps, "lr": args.lr,
                             "batch": args.batch, "final_loss": history[-1] if history else None})
    write_manifest(run, [args.data], [args.out], Path(args.out + ".manifest.json"))
    return 0


def cmd_train_dca(args) -> int:
    bundle = _load_bundle(args.base, [])
    records = synth.load_records(args.data)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr)
    dca_store, history = train_stage1(bundle.store, records, bundle.config,
                                      bundle.schedule, cfg, args.seed)
    save_checkpoint(dca_store, args.out)
    run = RunConfig(command="train-dca", seed=args.seed,
                    options={"base": args.base, "data": args.data, "steps": args.steps,
                             "lr": args.lr, "final_loss": history[-1] if history else None})
    write_manifest(run, [args.base, args.data], [args.out],
                   Path(args.out + ".manifest.json"))
    return 0


def cmd_train_rpa(args) -> int:
    from .stage2_data import prepare_stage2_samples
    bundle = _load_bundle(args.base, [args.dca])
    records = synth.load_records(args.data)
    samples = prepare_stage2_samples(records, args.patch, bundle, args.seed)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr)
    rpa_store, history = train_stage2(bundle.store, samples, bundle.config,
                                      bundle.schedule, cfg, args.seed)
    save_checkpoint(rpa_store, args.out)
    run = RunConfig(command="train-rpa", seed=args.seed, patch=args.patch,
                    options={"base": args.base, "dca": args.dca, "data": args.data,
                             "steps": args.steps, "lr": args.lr,
                             "final_loss": history[-1] if history else None})
    write_manifest(run, [args.base, args.dca, args.data], [args.out],
                   Path(args.out + ".manifest.json"))
    return 0


def _parse_patch_prompts(items: list[str]) -> dict[int, list[int]]:
    out = {}
    for item in items or []:
        idx, _, words = item.partition(":")
        if not idx.isdigit() or not words:
            raise UsageError(f"--patch-prompt expects INDEX:\"tokens\", got {item!r}")
        out[int(idx)] = vocab.encode(words)
    return out


def cmd_inpaint(args) -> int:
    bundle = _load_bundle(args.base, [args.dca, args.rpa])
    image = netpbm.read_image(args.image)
    mask = netpbm.read_mask(args.mask)
    prompt = vocab.encode(args.prompt)
    patch_prompts = _parse_patch_prompts(args.patch_prompt)
    masked = image * (1.0 - mask)[None]
    task = InpaintTask(masked_image=masked, mask=mask, prompt=prompt,
                       patch_prompts=patch_prompts, seed=args.seed)
    sampler = SamplerConfig(steps=args.steps, cfg_scale=args.cfg)
    use_rpa = args.rpa is not None
    cfg = PipelineConfig(patch_h=args.patch, patch_w=args.patch, sampler=sampler,
                         use_dca=True, use_rpa=use_rpa, use_ctrl=use_rpa,
                         jobs=args.jobs)
    out_img = run_full_pipeline(task, bundle, cfg)
    netpbm.write_image(args.out, out_img)
    run = RunConfig(command="inpaint", seed=args.seed, steps=args.steps,
                    cfg_scale=args.cfg, patch=args.patch,
                    options={"image": args.image, "mask": args.mask,
                             "prompt": args.prompt, "base": args.base,
                             "dca": args.dca, "rpa": args.rpa, "jobs": args.jobs})
    inputs = [p for p in (args.image, args.mask, args.base, args.dca, args.rpa) if p]
    write_manifest(run, inputs, [args.out], Path(args.out + ".manifest.json"))
    return 0


def cmd_eval(args) -> int:
    spec = json.loads(Path(args.config).read_text())
    mode = spec.get("mode", "stage1")
    records = synth.load_records(spec["data"])
    count = int(spec.get("count", len(records)))
    records = records[:count]
    sampler = SamplerConfig(**spec.get("sampler", {}))
    patch = int(spec.get("patch", 64))
    pipe_cfg = PipelineConfig(patch_h=patch, patch_w=patch, sampler=sampler)

    def build_arm(d: dict) -> AblationArm:
        bundle = _load_bundle(d["base"], [d.get("dca"), d.get("rpa")])
        return AblationArm(name=d["name"], bundle=bundle,
                           use_dca=bool(d.get("use_dca", d.get("dca") is not None)),
                           use_rpa=bool(d.get("use_rpa", d.get("rpa") is not None)),
                           use_ctrl=bool(d.get("use_ctrl", d.get("rpa") is not None)))

    arm_a = build_arm(spec["arm_a"])
    arm_b = build_arm(spec["arm_b"])
    tasks = []
    for rec in records:
        masked = rec.image * (1.0 - rec.mask)[None]
        tasks.append(EvalTask(task=InpaintTask(masked_image=masked, mask=rec.mask,
                                               prompt=rec.prompt, seed=0),
                              truth=rec.image))
    base_seed = int(spec.get("seed", 0))
    seeds = [derive_key(base_seed, "eval", i) for i in range(len(tasks))]
    result = run_ablation(arm_a, arm_b, tasks, seeds, pipe_cfg, mode=mode)
    doc = result.to_dict()
    doc["config_echo"] = spec
    Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1, default=str))
    run = RunConfig(command="eval", seed=base_seed, steps=sampler.steps,
                    cfg_scale=sampler.cfg_scale, patch=patch,
                    options={"config": args.config, "mode": mode})
    write_manifest(run, [args.config, spec["data"]], [args.out],
                   Path(args.out + ".manifest.json"))
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

class UsageError(ValueError):
    pass


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("PADAPTER_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="padapter",
                                description="two-stage adapter inpainting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--mix", type=float, default=0.6)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("pretrain", help="pretrain the backbone")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=1500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--dim", type=int, default=64)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--token", type=int, default=8)
    t.add_argument("--timesteps", type=int, default=100)
    t.set_defaults(fn=cmd_pretrain)

    d = sub.add_parser("train-dca", help="stage 1: train the dual-context adapter")
    d.add_argument("--base", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--steps", type=int, default=2000)
    d.add_argument("--lr", type=float, default=1e-4)
    d.add_argument("--batch", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_train_dca)

    r = sub.add_parser("train-rpa", help="stage 2: train the reference-patch adapter")
    r.add_argument("--base", required=True)
    r.add_argument("--dca", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--patch", type=int, default=64)
    r.add_argument("--steps", type=int, default=800)
    r.add_argument("--lr", type=float, default=1e-4)
    r.add_argument("--batch", type=int, default=16)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_train_rpa)

    i = sub.add_parser("inpaint", help="run the full inpainting pipeline")
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--patch-prompt", action="append", default=[],
                   metavar="INDEX:TOKENS")
    i.add_argument("--base", required=True)
    i.add_argument("--dca", required=True)
    i.add_argument("--rpa", default=None)
    i.add_argument("--patch", type=int, default=64)
    i.add_argument("--steps", type=int, default=30)
    i.add_argument("--cfg", type=float, default=7.0)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--jobs", type=int, default=_default_jobs())
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_inpaint)

    e = sub.add_parser("eval", help="run a paired ablation evaluation")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, vocab.VocabError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> single machine-parsable line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

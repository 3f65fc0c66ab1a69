"""Synthetic texture scenes, mask generation and degradation simulation.

A scene is a procedural background texture plus an optional foreground shape,
rendered deterministically from (spec, seed).  Every attribute a scene is
built from has a word in the closed vocabulary, so the generator doubles as
an oracle captioner: the returned foreground/background token lists are exact
descriptions of what was drawn.

Masks come in four kinds: brush strokes (random polyline with varying
radius), rectangles, random shape unions, and the scene's own foreground
segmentation.  Datasets mix them deterministically: the first
ceil(mix * count) items use a random kind, the rest segmentation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import netpbm, vocab
from .autodiff import ContractError
from .imageops import bilinear_resize, gaussian_blur
from .rng import Stream, derive_key, stream


# ---------------------------------------------------------------------------
# scene specs and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BgSpec:
    family: str
    color_a: str
    color_b: str = "white"
    orientation: str = "horizontal"
    frequency: str = "medium"


@dataclass(frozen=True)
class FgSpec:
    shape: str
    color: str
    size: str = "small"          # "small" | "large"
    cx: float = 0.5              # center as a fraction of width
    cy: float = 0.5


@dataclass(frozen=True)
class SceneSpec:
    bg: BgSpec
    fg: FgSpec | None = None


def bg_tokens(spec: BgSpec) -> list[int]:
    words = {
        "stripes": [spec.family, spec.color_a, spec.color_b, spec.orientation, spec.frequency],
        "checker": [spec.family, spec.color_a, spec.color_b, spec.frequency],
        "gradient": [spec.family, spec.color_a, spec.color_b, spec.orientation],
        "blobs": [spec.family, spec.color_a, spec.color_b],
        "plain": [spec.family, spec.color_a],
    }.get(spec.family)
    if words is None:
        raise ContractError(f"unknown texture family {spec.family!r}")
    return vocab.encode(words)


def fg_tokens(spec: FgSpec | None) -> list[int]:
    if spec is None:
        return []
    return vocab.encode([spec.shape, spec.color, spec.size])


def _grid(h: int, w: int):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    return ys, xs


def _solid(color: str, h: int, w: int) -> np.ndarray:
    return np.tile(np.array(vocab.RGB[color], dtype=np.float64)[:, None, None], (1, h, w))


def _orient_coord(orientation: str, ys, xs):
    if orientation == "horizontal":
        return ys + np.zeros_like(xs)
    if orientation == "vertical":
        return xs + np.zeros_like(ys)
    if orientation == "diagonal":
        return ys + xs
    raise ContractError(f"unknown orientation {orientation!r}")


def render_background(spec: BgSpec, h: int, w: int, rs: Stream) -> np.ndarray:
    ys, xs = _grid(h, w)
    a = np.array(vocab.RGB[spec.color_a], dtype=np.float64)[:, None, None]
    b = np.array(vocab.RGB[spec.color_b], dtype=np.float64)[:, None, None]
    if spec.family == "plain":
        return _solid(spec.color_a, h, w)
    if spec.family == "stripes":
        p = vocab.PERIODS[spec.frequency]
        coord = _orient_coord(spec.orientation, ys, xs)
        sel = ((coord // p) % 2).astype(np.float64)[None]
        return a * (1 - sel) + b * sel
    if spec.family == "checker":
        p = vocab.PERIODS[spec.frequency]
        sel = (((ys // p) + (xs // p)) % 2).astype(np.float64)[None]
        return a * (1 - sel) + b * sel
    if spec.family == "gradient":
        coord = _orient_coord(spec.orientation, ys, xs)
        t = (coord / coord.max())[None]
        return a * (1 - t) + b * t
    if spec.family == "blobs":
        img = _solid(spec.color_b, h, w)
        count = 3 + rs.randint(5)
        rmin, rmax = min(h, w) / 12.0, min(h, w) / 6.0
        for _ in range(count):
            cy = rs.uniform(1, 0, h - 1)[0]
            cx = rs.uniform(1, 0, w - 1)[0]
            r = rs.uniform(1, rmin, rmax)[0]
            hit = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
            img[:, hit] = a[:, 0]
        return img
    raise ContractError(f"unknown texture family {spec.family!r}")


def shape_mask(spec: FgSpec, h: int, w: int) -> np.ndarray:
    """Binary support of the foreground shape."""
    ys, xs = _grid(h, w)
    r = (0.10 if spec.size == "small" else 0.18) * min(h, w)
    cx, cy = spec.cx * (w - 1), spec.cy * (h - 1)
    dx, dy = xs - cx, ys - cy
    if spec.shape == "circle":
        hit = dx ** 2 + dy ** 2 <= r * r
    elif spec.shape == "square":
        hit = np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    elif spec.shape == "triangle":
        half = 0.9 * r * (dy + r) / (1.7 * r)
        hit = (dy >= -r) & (dy <= 0.7 * r) & (np.abs(dx) <= half)
    elif spec.shape == "ring":
        d2 = dx ** 2 + dy ** 2
        hit = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif spec.shape == "cross":
        hit = ((np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)) | \
              ((np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r))
    elif spec.shape == "diamond":
        hit = np.abs(dx) + np.abs(dy) <= r
    else:
        raise ContractError(f"unknown shape {spec.shape!r}")
    return hit.astype(np.float64)


def gen_scene(spec: SceneSpec, size, seed: int):
    """Render a scene.

    Returns (image (3, H, W) in [0, 1], fg token ids, bg token ids,
    foreground segmentation mask (H, W)).  ``size`` is an int for square
    output or an (h, w) pair.
    """
    h, w = (size, size) if isinstance(size, int) else size
    rs = Stream(derive_key(seed, "scene"))
    img = render_background(spec.bg, h, w, rs)
    seg = np.zeros((h, w), dtype=np.float64)
    if spec.fg is not None:
        seg = shape_mask(spec.fg, h, w)
        img = img * (1 - seg)[None] + _solid(spec.fg.color, h, w) * seg[None]
    return img, fg_tokens(spec.fg), bg_tokens(spec.bg), seg


def random_scene_spec(rs: Stream, with_fg: bool = True,
                      families: list[str] | None = None) -> SceneSpec:
    families = families or ["stripes", "checker", "gradient", "blobs"]
    family = rs.choice(families)
    color_a = rs.choice(vocab.COLORS)
    color_b = rs.choice([c for c in vocab.COLORS if c != color_a])
    bg = BgSpec(family=family, color_a=color_a, color_b=color_b,
                orientation=rs.choice(vocab.ORIENTATIONS),
                frequency=rs.choice(vocab.FREQUENCIES))
    fg = None
    if with_fg:
        fg_color = rs.choice([c for c in vocab.COLORS if c not in (color_a, color_b)])
        fg = FgSpec(shape=rs.choice(vocab.SHAPES), color=fg_color,
                    size=rs.choice(vocab.SIZES),
                    cx=rs.uniform(1, 0.25, 0.75)[0], cy=rs.uniform(1, 0.25, 0.75)[0])
    return SceneSpec(bg=bg, fg=fg)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

MASK_KINDS = ("brush", "rectangle", "random-shape", "segmentation")
RANDOM_MASK_KINDS = ("brush", "rectangle", "random-shape")


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    seed: int = 0


def _stamp_disk(mask: np.ndarray, cx: float, cy: float, r: float) -> None:
    h, w = mask.shape
    x0, x1 = max(0, int(cx - r - 1)), min(w, int(cx + r + 2))
    y0, y1 = max(0, int(cy - r - 1)), min(h, int(cy + r + 2))
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    hit = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    mask[y0:y1, x0:x1][hit] = 1.0


def _brush_mask(h: int, w: int, rs: Stream) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.float64)
    n_points = 3 + rs.randint(6)
    px = rs.uniform(n_points, 0.1 * w, 0.9 * w)
    py = rs.uniform(n_points, 0.1 * h, 0.9 * h)
    radii = rs.uniform(n_points, 2.0, 6.0)
    for i in range(n_points - 1):
        dist = float(np.hypot(px[i + 1] - px[i], py[i + 1] - py[i]))
        steps = max(1, int(np.ceil(dist * 2)))
        for s in range(steps + 1):
            t = s / steps
            _stamp_disk(mask,
                        px[i] * (1 - t) + px[i + 1] * t,
                        py[i] * (1 - t) + py[i + 1] * t,
                        radii[i] * (1 - t) + radii[i + 1] * t)
    return mask


def _rect_mask(h: int, w: int, rs: Stream) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.float64)
    rw = max(2, int(rs.uniform(1, 0.15, 0.45)[0] * w))
    rh = max(2, int(rs.uniform(1, 0.15, 0.45)[0] * h))
    x0 = rs.randint(max(1, w - rw))
    y0 = rs.randint(max(1, h - rh))
    mask[y0:y0 + rh, x0:x0 + rw] = 1.0
    return mask


def _random_shape_mask(h: int, w: int, rs: Stream) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.float64)
    ys, xs = _grid(h, w)
    for _ in range(2 + rs.randint(3)):
        cx = rs.uniform(1, 0.15 * w, 0.85 * w)[0]
        cy = rs.uniform(1, 0.15 * h, 0.85 * h)[0]
        r = rs.uniform(1, 0.08, 0.2)[0] * min(h, w)
        prim = rs.randint(3)
        if prim == 0:
            hit = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        elif prim == 1:
            hit = np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= r
        else:
            hit = np.abs(xs - cx) + np.abs(ys - cy) <= 1.3 * r
        mask[hit] = 1.0
    return mask


def gen_mask(spec: MaskSpec, size, segmentation: np.ndarray | None = None) -> np.ndarray:
    """Render a binary mask (1 = hole) of the requested kind."""
    h, w = (size, size) if isinstance(size, int) else size
    if spec.kind == "segmentation":
        if segmentation is None:
            raise ContractError("segmentation mask kind needs the scene's segmentation")
        if segmentation.shape != (h, w):
            raise ContractError(
                f"segmentation shape {segmentation.shape} does not match ({h}, {w})")
        return (segmentation > 0).astype(np.float64)
    if spec.kind not in RANDOM_MASK_KINDS:
        raise ContractError(f"unknown mask kind {spec.kind!r}")
    for attempt in range(8):
        rs = Stream(derive_key(spec.seed, "mask", spec.kind, attempt))
        if spec.kind == "brush":
            mask = _brush_mask(h, w, rs)
        elif spec.kind == "rectangle":
            mask = _rect_mask(h, w, rs)
        else:
            mask = _random_shape_mask(h, w, rs)
        if mask.any():
            return mask
    raise ContractError("failed to generate a nonempty mask")


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradeConfig:
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    resample: bool = True
    noise_sigma: tuple[float, float] = (0.01, 0.05)


def degrade(image: np.ndarray, seed: int, cfg: DegradeConfig = DegradeConfig()) -> np.ndarray:
    """Blur, 2x down/up resample and additive Gaussian noise, seed-driven."""
    rs = Stream(derive_key(seed, "degrade"), lanes=64)
    out = image
    sigma = rs.uniform(1, *cfg.blur_sigma)[0]
    if sigma > 0:
        out = gaussian_blur(out, sigma)
    if cfg.resample:
        c, h, w = out.shape
        out = bilinear_resize(bilinear_resize(out, h // 2, w // 2), h, w)
    noise_sigma = rs.uniform(1, *cfg.noise_sigma)[0]
    if noise_sigma > 0:
        out = out + noise_sigma * rs.normal(out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SceneRecord:
    index: int
    image_u8: np.ndarray          # (3, H, W) uint8
    mask: np.ndarray              # (H, W) float {0, 1}
    fg: list[int]
    bg: list[int]
    mask_kind: str
    spec: SceneSpec

    @property
    def image(self) -> np.ndarray:
        return self.image_u8.astype(np.float64) / 255.0

    @property
    def prompt(self) -> list[int]:
        return vocab.compose_prompt(self.fg, self.bg)


def _quantize_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def build_records(count: int, size, mix: float, seed: int,
                  families: list[str] | None = None) -> list[SceneRecord]:
    """Deterministic in-memory dataset; first ceil(mix * count) items get a
    random mask kind, the rest use the scene's segmentation."""
    if not 0.0 <= mix <= 1.0:
        raise ContractError(f"mix must be in [0, 1], got {mix}")
    n_random = int(np.ceil(mix * count))
    records = []
    for i in range(count):
        item_seed = derive_key(seed, "item", i)
        spec = random_scene_spec(Stream(derive_key(item_seed, "spec")), families=families)
        img, fg, bg, seg = gen_scene(spec, size, item_seed)
        if i < n_random:
            kind = RANDOM_MASK_KINDS[Stream(derive_key(item_seed, "kind")).randint(3)]
            mask = gen_mask(MaskSpec(kind=kind, seed=item_seed), size)
        else:
            kind = "segmentation"
            mask = gen_mask(MaskSpec(kind=kind, seed=item_seed), size, segmentation=seg)
        records.append(SceneRecord(index=i, image_u8=_quantize_u8(img), mask=mask,
                                   fg=fg, bg=bg, mask_kind=kind, spec=spec))
    return records


def build_dataset(count: int, size, mix: float, seed: int, out_dir) -> dict:
    """Write a dataset tree (images, masks, metadata, manifest) to disk."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = build_records(count, size, mix, seed)
    entries = []
    for rec in records:
        img_name = f"img_{rec.index:05d}.ppm"
        mask_name = f"mask_{rec.index:05d}.pgm"
        meta_name = f"meta_{rec.index:05d}.json"
        netpbm.write_image(out / img_name, rec.image)
        netpbm.write_mask(out / mask_name, rec.mask)
        meta = {"fg": vocab.decode(rec.fg), "bg": vocab.decode(rec.bg),
                "prompt": " ".join(vocab.decode(rec.prompt)),
                "mask_kind": rec.mask_kind, "spec": asdict(rec.spec)}
        (out / meta_name).write_text(json.dumps(meta, sort_keys=True, indent=1))
        entries.append({"image": img_name, "mask": mask_name, "meta": meta_name,
                        "mask_kind": rec.mask_kind})
    h, w = (size, size) if isinstance(size, int) else size
    manifest = {"count": count, "height": h, "width": w, "mix": mix, "seed": seed,
                "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_records(data_dir) -> list[SceneRecord]:
    """Load a dataset tree written by build_dataset."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    records = []
    for i, entry in enumerate(manifest["entries"]):
        img = netpbm.read_image(root / entry["image"])
        mask = netpbm.read_mask(root / entry["mask"])
        meta = json.loads((root / entry["meta"]).read_text())
        spec_d = meta["spec"]
        fg_spec = FgSpec(**spec_d["fg"]) if spec_d.get("fg") else None
        spec = SceneSpec(bg=BgSpec(**spec_d["bg"]), fg=fg_spec)
        records.append(SceneRecord(
            index=i, image_u8=_quantize_u8(img), mask=mask,
            fg=vocab.encode(meta["fg"]), bg=vocab.encode(meta["bg"]),
            mask_kind=entry["mask_kind"], spec=spec))
    return records

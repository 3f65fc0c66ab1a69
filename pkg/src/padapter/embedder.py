"""Deterministic joint image/text embedder.

Image embeddings concatenate per-channel intensity histograms, a
gradient-orientation histogram and a 4x4 mean-pool grid, then project to 64
dims with a fixed seeded random matrix, so they are pure functions of the
pixels.  Text embeddings are bags of per-token anchor vectors: each
vocabulary word is anchored to the image embedding of a small canonical
exemplar patch rendered for that word (a solid color for color words, the
texture for family words, and so on).  Anchoring text to rendered exemplars
keeps the two modalities in one comparable space, which is what the
prompt-alignment metric needs; bag semantics make token order irrelevant.

Everything is keyed to one baked-in seed, so embeddings are bit-identical
across processes and machines.
"""

from __future__ import annotations

import numpy as np

from . import vocab
from .autodiff import ContractError
from .rng import Stream, derive_key

EMBED_DIM = 64
EMBED_SEED = int.from_bytes(b"C11P", "big")

_proj_cache: dict[int, np.ndarray] = {}
_anchor_cache: dict[int, np.ndarray] = {}


def _projection(feat_len: int) -> np.ndarray:
    if feat_len not in _proj_cache:
        rs = Stream(derive_key(EMBED_SEED, "proj", feat_len), lanes=64)
        _proj_cache[feat_len] = rs.normal((feat_len, EMBED_DIM)) / np.sqrt(feat_len)
    return _proj_cache[feat_len]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def image_features(patch: np.ndarray) -> np.ndarray:
    """Raw feature vector: histograms, gradient orientations, mean pools.

    Groups are L2-normalized before concatenation so color histograms do not
    drown the texture terms; gradient orientations are folded to undirected
    axes and weighted up, and pool grids are mean-centered so they describe
    layout rather than palette.
    """
    c, h, w = patch.shape
    feats = []
    for ch in range(c):
        hist, _ = np.histogram(patch[ch], bins=16, range=(0.0, 1.0))
        feats.append(_unit(hist.astype(np.float64) / patch[ch].size))
    gray = patch.mean(axis=0)
    gy = np.zeros_like(gray)
    gx = np.zeros_like(gray)
    gy[1:-1] = (gray[2:] - gray[:-2]) * 0.5
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) * 0.5
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum(theta / np.pi * 8, 7.999).astype(np.int64)
    ohist = np.zeros(8, dtype=np.float64)
    np.add.at(ohist, bins.reshape(-1), mag.reshape(-1))
    feats.append(1.5 * _unit(ohist))
    ys = np.linspace(0, h, 5).astype(np.int64)
    xs = np.linspace(0, w, 5).astype(np.int64)
    for ch in range(c):
        pool = np.empty((4, 4))
        for i in range(4):
            for j in range(4):
                cell = patch[ch, ys[i]:max(ys[i] + 1, ys[i + 1]),
                             xs[j]:max(xs[j] + 1, xs[j + 1])]
                pool[i, j] = cell.mean()
        feats.append(_unit(pool.reshape(-1) - pool.mean()))
    return np.concatenate(feats)


def embed_image(patch: np.ndarray) -> np.ndarray:
    """64-dim embedding of a (C, H, W) image patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.size == 0:
        raise ContractError(f"embed_image needs a nonempty (C, H, W) patch, got {patch.shape}")
    f = image_features(patch)
    return f @ _projection(f.size)


def _exemplar(token_id: int) -> np.ndarray:
    """Canonical 32x32 patch illustrating one vocabulary word."""
    from . import synth

    word = vocab.TOKENS[token_id]
    if word in vocab.COLORS:
        spec = synth.SceneSpec(bg=synth.BgSpec("plain", word))
    elif word in vocab.FAMILIES:
        spec = synth.SceneSpec(bg=synth.BgSpec(word, "gray", "white", "vertical", "medium"))
    elif word in vocab.ORIENTATIONS:
        spec = synth.SceneSpec(bg=synth.BgSpec("stripes", "black", "white", word, "medium"))
    elif word in vocab.FREQUENCIES:
        spec = synth.SceneSpec(bg=synth.BgSpec("stripes", "gray", "white", "vertical", word))
    elif word in vocab.SHAPES:
        spec = synth.SceneSpec(bg=synth.BgSpec("plain", "white"),
                               fg=synth.FgSpec(word, "black", "large"))
    elif word in vocab.SIZES:
        spec = synth.SceneSpec(bg=synth.BgSpec("plain", "white"),
                               fg=synth.FgSpec("circle", "black", word))
    else:
        raise ContractError(f"token {word!r} has no visual exemplar")
    img, _, _, _ = synth.gen_scene(spec, 32, EMBED_SEED)
    return img


def token_anchor(token_id: int) -> np.ndarray:
    """Anchor vector of one content token (pad/separator excluded)."""
    if not 0 <= token_id < vocab.VOCAB_SIZE:
        raise ContractError(f"token id {token_id} out of range")
    if token_id in (vocab.PAD_ID, vocab.SEP_ID):
        raise ContractError("structural tokens have no anchor")
    if token_id not in _anchor_cache:
        _anchor_cache[token_id] = embed_image(_exemplar(token_id))
    return _anchor_cache[token_id]


def embed_text(token_ids: list[int]) -> np.ndarray:
    """Mean of content-token anchors; the zero vector for an empty bag."""
    vecs = []
    for tid in token_ids:
        if not 0 <= tid < vocab.VOCAB_SIZE:
            raise ContractError(f"token id {tid} out of range")
        if tid in (vocab.PAD_ID, vocab.SEP_ID):
            continue
        vecs.append(token_anchor(tid))
    if not vecs:
        return np.zeros(EMBED_DIM)
    return np.mean(vecs, axis=0)


def is_zero_embedding(v: np.ndarray) -> bool:
    return not np.any(v)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; -inf when either operand has zero norm, so
    degenerate embeddings order below every real similarity."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return float("-inf")
    return float(np.dot(a, b) / (na * nb))

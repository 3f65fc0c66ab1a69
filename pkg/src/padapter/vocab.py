"""Closed prompt vocabulary shared by the generator, embedder and backbone.

Token ids are stable: 0 is padding, 1 is the foreground/background separator.
Everything else names a visual attribute the synthetic scene generator can
render, which keeps text conditioning learnable at toy scale and makes
prompt composition exact.
"""

from __future__ import annotations

PAD = "<pad>"
SEP = "|"

FAMILIES = ["stripes", "checker", "gradient", "blobs", "plain"]
COLORS = ["red", "green", "blue", "yellow", "magenta", "cyan",
          "orange", "white", "black", "gray"]
ORIENTATIONS = ["horizontal", "vertical", "diagonal"]
FREQUENCIES = ["fine", "medium", "coarse"]
SHAPES = ["circle", "square", "triangle", "ring", "cross", "diamond"]
SIZES = ["small", "large"]

TOKENS: list[str] = [PAD, SEP] + FAMILIES + COLORS + ORIENTATIONS + FREQUENCIES + SHAPES + SIZES

TOKEN_IDS: dict[str, int] = {tok: i for i, tok in enumerate(TOKENS)}

PAD_ID = TOKEN_IDS[PAD]
SEP_ID = TOKEN_IDS[SEP]

VOCAB_SIZE = len(TOKENS)

RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.12, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.80, 0.10, 0.80),
    "cyan": (0.10, 0.80, 0.80),
    "orange": (0.95, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "gray": (0.50, 0.50, 0.50),
}

# stripe/checker cell size in pixels per frequency word, for a 64 px image
PERIODS = {"fine": 4, "medium": 8, "coarse": 16}


class VocabError(ValueError):
    """A word outside the closed vocabulary."""


def encode(words: list[str] | str) -> list[int]:
    """Words -> token ids; raises VocabError on unknown words."""
    if isinstance(words, str):
        words = words.split()
    ids = []
    for w in words:
        if w not in TOKEN_IDS:
            raise VocabError(f"unknown token {w!r}")
        ids.append(TOKEN_IDS[w])
    return ids


def decode(ids: list[int]) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise VocabError(f"token id {i} out of range")
        out.append(TOKENS[i])
    return out


def compose_prompt(fg: list[int], bg: list[int]) -> list[int]:
    """Hierarchical prompt: foreground tokens, separator, background tokens.

    Empty components are permitted and drop the separator.
    """
    for tok in list(fg) + list(bg):
        if not 0 <= tok < VOCAB_SIZE:
            raise VocabError(f"token id {tok} out of range")
    if not fg:
        return list(bg)
    if not bg:
        return list(fg)
    return list(fg) + [SEP_ID] + list(bg)

"""Dual-context adapter: background-isolated queries feeding a second,
text-refined attention pass, trained in stage 1 against a frozen backbone.

The adapter adds three trainable d x d matrices per adapted cross-attention
layer.  Its residual is built in two hops: a query formed only from unmasked
(background) tokens attends to the text; that intermediate is projected into
fresh keys/values which the original query attends to.  The intermediate
never reaches the output directly.  With the key/value projections at zero
the residual vanishes identically, so a freshly initialized adapter is an
exact no-op on the pretrained model.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (ContractError, ShapeError, add, mask_rows, matmul,
                       reshape, value)
from .backbone import Denoiser, DenoiserConfig, multihead_attention
from .checkpoint import ParameterStore
from .rng import Stream, derive_key


def mask_to_tokens(mask: np.ndarray, token_size: int) -> np.ndarray:
    """Pixel mask -> token-grid mask: a token is masked iff any pixel in its
    cell is masked.  Returns a (rows, cols) array in {0, 1}."""
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError("pixel mask must be strictly binary")
    h, w = mask.shape
    if h % token_size or w % token_size:
        raise ContractError(
            f"mask {h}x{w} not divisible by token size {token_size}")
    cells = mask.reshape(h // token_size, token_size, w // token_size, token_size)
    return (cells.max(axis=(1, 3)) > 0).astype(np.float64)


def dca_residual(z, q, k, v, token_mask, dca_w: dict, heads: int):
    """Second-pass residual given the base layer's projections.

    z: (B, N, d) features entering the cross-attention; q/k/v: the frozen
    projections; token_mask: (B, N) with 1 on masked tokens.
    """
    if value(z).shape[:-1] != np.shape(token_mask):
        raise ShapeError(
            f"token mask {np.shape(token_mask)} does not match features {value(z).shape}")
    q_bg = matmul(mask_rows(z, 1.0 - np.asarray(token_mask)), dca_w["wq"])
    z_bg = multihead_attention(q_bg, k, v, heads)
    k2 = matmul(z_bg, dca_w["wk"])
    v2 = matmul(z_bg, dca_w["wv"])
    return multihead_attention(q, k2, v2, heads)


def dca_forward(z, c, token_mask, base_w: dict, dca_w: dict, heads: int = 1):
    """Full adapted attention for one layer: base attention plus the
    dual-context residual.  Accepts (N, d) or (B, N, d) features."""
    single = value(z).ndim == 2
    zz = reshape(z, (1,) + value(z).shape) if single else z
    cc = reshape(c, (1,) + value(c).shape) if single else c
    m = np.asarray(token_mask, dtype=np.float64)
    m = m.reshape(1, -1) if single else m.reshape(value(zz).shape[0], -1)
    q = matmul(zz, base_w["wq"])
    k = matmul(cc, base_w["wk"])
    v = matmul(cc, base_w["wv"])
    base = multihead_attention(q, k, v, heads)
    out = add(base, dca_residual(zz, q, k, v, m, dca_w, heads))
    if single:
        out = reshape(out, value(out).shape[1:])
    return out


def init_dca_params(config: DenoiserConfig, seed: int) -> ParameterStore:
    """Zero key/value projections, small-Gaussian query projection."""
    store = ParameterStore()
    rs = Stream(derive_key(seed, "dca_init"), lanes=64)
    d = config.dim
    for i in config.adapted():
        store.put(f"dca.l{i}.wq", rs.normal((d, d)) * 0.02)
        store.put(f"dca.l{i}.wk", np.zeros((d, d)))
        store.put(f"dca.l{i}.wv", np.zeros((d, d)))
    return store


def train_stage1(base: ParameterStore, records, den_cfg: DenoiserConfig,
                 schedule, train_cfg, seed: int):
    """Fit the adapter on noise prediction with the backbone frozen.

    Returns (dca ParameterStore, loss history).  The frozen partition is
    hash-checked: any change to a base tensor aborts.
    """
    from .backbone import AdapterInputs
    from .training import run_training

    base_names = base.names("base.")
    if not base_names:
        raise ContractError("no backbone weights in store")
    for name in base_names:
        if not base.is_frozen(name):
            raise ContractError(f"backbone tensor {name} is not frozen")
    store = base.copy()
    store.merge(init_dca_params(den_cfg, seed))
    trainable = store.names("dca.")
    before = store.frozen_hash("base.")

    def adapter_builder(params, _extra):
        return AdapterInputs(dca={n: params[n] for n in trainable})

    history = run_training(store, trainable, records, den_cfg, schedule,
                           train_cfg, seed, adapter_builder=adapter_builder)
    if store.frozen_hash("base.") != before:
        raise ContractError("frozen backbone changed during stage-1 training")
    return store.subset("dca."), history

"""Token-grid transformer denoiser with adapter hooks.

The denoiser predicts the noise content of a latent image given the masked
input, the mask and a text prompt.  Conditioning follows the
channel-concatenation scheme: (y_t, masked_image, mask) stack into a
(2C + 1)-channel image, which is cut into square cells and projected to the
embedding dim.  Each of the L blocks runs self-attention, text
cross-attention (where the stage adapters hook in) and a feed-forward, all
pre-norm with residuals.  The final projection starts at zero, so a fresh
model predicts zero noise.

Inputs smaller than the configured size are supported as long as they divide
into whole cells: the learned positional table is indexed by (row, col) of
the configured grid, so rectangular inputs use its top-left block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .autodiff import (ContractError, ShapeError, Traced, add, add_bcast0,
                       add_token_bias, gelu, layer_norm, mask_rows, matmul,
                       mul, reshape, scale, softmax, sub, take_rows,
                       transpose, value)
from .checkpoint import ParameterStore
from .rng import Stream, derive_key


@dataclass(frozen=True)
class DenoiserConfig:
    height: int = 64
    width: int = 64
    channels: int = 3
    token_size: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    max_prompt: int = 12
    adapted_layers: tuple[int, ...] = ()   # empty = every layer

    def __post_init__(self):
        if self.height % self.token_size or self.width % self.token_size:
            raise ContractError(
                f"image {self.height}x{self.width} not divisible by token size {self.token_size}")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid_rows(self) -> int:
        return self.height // self.token_size

    @property
    def grid_cols(self) -> int:
        return self.width // self.token_size

    @property
    def n_tokens(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def cell_in(self) -> int:
        return self.token_size ** 2 * (2 * self.channels + 1)

    @property
    def cell_out(self) -> int:
        return self.token_size ** 2 * self.channels

    def adapted(self) -> tuple[int, ...]:
        return self.adapted_layers or tuple(range(self.layers))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "height", "width", "channels", "token_size", "dim", "layers",
            "heads", "ffn_mult", "vocab_size", "max_prompt")} | {
            "adapted_layers": list(self.adapted_layers)}

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["adapted_layers"] = tuple(d.get("adapted_layers", ()))
        return DenoiserConfig(**d)


@dataclass
class TextEmbedding:
    vectors: object            # (Lp, d) array or traced
    padding: np.ndarray        # (Lp,) bool, True on padded rows


def init_base_params(config: DenoiserConfig, seed: int) -> ParameterStore:
    """Fresh backbone weights under base.* names (final projection zeroed)."""
    store = ParameterStore()
    rs = Stream(derive_key(seed, "init"), lanes=64)

    def dense(fan_in, fan_out):
        return rs.normal((fan_in, fan_out)) / math.sqrt(fan_in)

    d = config.dim
    store.put("base.text.table", rs.normal((config.vocab_size, d)) * 0.02)
    store.put("base.text.pos", rs.normal((config.max_prompt, d)) * 0.02)
    store.put("base.tok.proj", dense(config.cell_in, d))
    store.put("base.pos.grid", rs.normal((config.n_tokens, d)) * 0.02)
    store.put("base.temb.w1", dense(d, d))
    store.put("base.temb.w2", dense(d, d))
    for i in range(config.layers):
        for blk in ("self", "cross"):
            for w in ("wq", "wk", "wv", "wo"):
                store.put(f"base.l{i}.{blk}.{w}", dense(d, d))
        store.put(f"base.l{i}.ffn.w1", dense(d, config.ffn_mult * d))
        store.put(f"base.l{i}.ffn.w2", dense(config.ffn_mult * d, d))
    store.put("base.out.proj", np.zeros((d, config.cell_out)))
    return store


# ---------------------------------------------------------------------------
# tensor plumbing
# ---------------------------------------------------------------------------

def image_to_cells(img: np.ndarray, token_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, rows*cols, ts*ts*C), cells in row-major order."""
    b, c, h, w = img.shape
    rows, cols = h // token_size, w // token_size
    x = img.reshape(b, c, rows, token_size, cols, token_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)            # (B, rows, cols, C, ts, ts)
    return np.ascontiguousarray(x.reshape(b, rows * cols, c * token_size * token_size))


def cells_to_image(tokens, b, c, rows, cols, token_size):
    """Differentiable inverse of image_to_cells for the output head."""
    x = reshape(tokens, (b, rows, cols, c, token_size, token_size))
    x = transpose(x, (0, 3, 1, 4, 2, 5))          # (B, C, rows, ts, cols, ts)
    return reshape(x, (b, c, rows * token_size, cols * token_size))


def timestep_embedding(ts: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def pad_prompt(ids: list[int], max_prompt: int) -> np.ndarray:
    if len(ids) > max_prompt:
        raise ContractError(f"prompt of {len(ids)} tokens exceeds limit {max_prompt}")
    out = np.full(max_prompt, vocab.PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def multihead_attention(q, k, v, heads: int):
    """Softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated.

    q: (B, Nq, d); k, v: (B, Nk, d).  With one head this is exactly the
    single-head formula on the full dim.
    """
    bq, nq, d = value(q).shape
    nk = value(k).shape[-2]
    hd = d // heads
    q = scale(q, 1.0 / math.sqrt(hd))   # same math, applied to the smaller side
    qh = transpose(reshape(q, (bq, nq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (bq, nk, heads, hd)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (bq, nk, heads, hd)), (0, 2, 1, 3))
    att = softmax(matmul(qh, kh))
    out = matmul(att, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (bq, nq, d))


def base_attention(z, c, weights: dict, heads: int = 1):
    """Frozen-path text cross-attention: Q = z Wq, K = c Wk, V = c Wv.

    Accepts (N, d) single instances or (B, N, d) batches.
    """
    single = value(z).ndim == 2
    if single:
        z = reshape(z, (1,) + value(z).shape)
        c = reshape(c, (1,) + value(c).shape)
    if value(z).shape[-1] != value(c).shape[-1]:
        raise ShapeError(
            f"feature dim {value(z).shape} does not match text dim {value(c).shape}")
    q = matmul(z, weights["wq"])
    k = matmul(c, weights["wk"])
    v = matmul(c, weights["wv"])
    out = multihead_attention(q, k, v, heads)
    if single:
        out = reshape(out, value(out).shape[1:])
    return out


# ---------------------------------------------------------------------------
# the denoiser
# ---------------------------------------------------------------------------

@dataclass
class AdapterInputs:
    """Per-forward adapter state: weight maps plus reference features."""
    dca: dict | None = None                        # name -> tensor (dca.*)
    rpa: dict | None = None                        # name -> tensor (rpa.*)
    refs: dict[int, object] | None = None          # layer -> (B, Nr, d)
    ctrl: dict | None = None                       # name -> tensor (ctrl.*)
    ctrl_image: np.ndarray | None = None           # (B, C, h, w) control patch


class Denoiser:
    """Noise predictor bound to a config and a parameter mapping."""

    def __init__(self, config: DenoiserConfig, params: dict):
        self.config = config
        self.params = params

    def encode_text(self, ids_batch: np.ndarray, table=None, pos=None):
        """(B, Lp) int ids -> (B, Lp, d) embeddings (lookup + positional)."""
        table = self.params["base.text.table"] if table is None else table
        pos = self.params["base.text.pos"] if pos is None else pos
        b, lp = ids_batch.shape
        if ids_batch.min() < 0 or ids_batch.max() >= self.config.vocab_size:
            raise ContractError("prompt token id outside vocabulary")
        flat = take_rows(table, ids_batch.reshape(-1))
        emb = reshape(flat, (b, lp, self.config.dim))
        return add_bcast0(emb, take_rows(pos, np.arange(lp)))

    def _grid_positions(self, rows: int, cols: int) -> np.ndarray:
        if rows > self.config.grid_rows or cols > self.config.grid_cols:
            raise ContractError(
                f"token grid {rows}x{cols} exceeds configured "
                f"{self.config.grid_rows}x{self.config.grid_cols}")
        r = np.repeat(np.arange(rows), cols)
        c = np.tile(np.arange(cols), rows)
        return r * self.config.grid_cols + c

    def forward(self, y_t: np.ndarray, t, prompt_ids: np.ndarray,
                mask: np.ndarray, masked_image: np.ndarray,
                adapters: AdapterInputs | None = None,
                capture: dict | None = None,
                use_positional: bool = True):
        """Predict noise for a batch.

        y_t, masked_image: (B, C, h, w); mask: (B, h, w); t: int or (B,)
        array; prompt_ids: (B, max_prompt).  Returns (B, C, h, w), traced
        when any bound parameter is traced.
        """
        cfg = self.config
        p = self.params
        if mask is None:
            raise ContractError("denoiser needs a mask")
        if y_t.ndim != 4:
            raise ContractError(f"expected batched (B, C, h, w), got {y_t.shape}")
        b, c, h, w = y_t.shape
        if c != cfg.channels or masked_image.shape != y_t.shape or mask.shape != (b, h, w):
            raise ShapeError(
                f"inconsistent inputs: y_t {y_t.shape}, masked {masked_image.shape}, "
                f"mask {mask.shape}")
        if h % cfg.token_size or w % cfg.token_size:
            raise ContractError(f"input {h}x{w} not divisible by token size")
        adapters = adapters or AdapterInputs()
        rows, cols = h // cfg.token_size, w // cfg.token_size
        n_tok = rows * cols

        stacked = np.concatenate([y_t, masked_image, mask[:, None]], axis=1)
        cells = image_to_cells(stacked, cfg.token_size)
        x = matmul(cells, p["base.tok.proj"])
        if capture is not None:
            capture["tokens_pre_positional"] = value(x)
        if use_positional:
            x = add_bcast0(x, take_rows(p["base.pos.grid"], self._grid_positions(rows, cols)))

        ts = np.full(b, t) if np.isscalar(t) else np.asarray(t)
        temb = timestep_embedding(ts, cfg.dim)[:, None, :]      # (B, 1, d)
        temb = matmul(gelu(matmul(temb, p["base.temb.w1"])), p["base.temb.w2"])
        x = add_token_bias(x, temb)

        c_emb = self.encode_text(prompt_ids)

        token_mask = None
        if adapters.dca is not None:
            from .dca import mask_to_tokens
            token_mask = np.stack([mask_to_tokens(mask[i], cfg.token_size)
                                   for i in range(b)]).reshape(b, n_tok)

        ctrl_cells = None
        if adapters.ctrl is not None:
            if adapters.ctrl_image is None:
                raise ContractError("control weights supplied without a control image")
            ctrl_cells = image_to_cells(adapters.ctrl_image, cfg.token_size)

        adapted = set(cfg.adapted())
        for i in range(cfg.layers):
            lp = f"base.l{i}"
            if ctrl_cells is not None:
                x = add(x, matmul(ctrl_cells, adapters.ctrl[f"ctrl.l{i}.proj"]))
            # self-attention
            xn = layer_norm(x)
            sw = {k: p[f"{lp}.self.{k}"] for k in ("wq", "wk", "wv")}
            sa = multihead_attention(matmul(xn, sw["wq"]), matmul(xn, sw["wk"]),
                                     matmul(xn, sw["wv"]), cfg.heads)
            x = add(x, matmul(sa, p[f"{lp}.self.wo"]))
            # cross-attention with adapter hooks
            xn = layer_norm(x)
            q = matmul(xn, p[f"{lp}.cross.wq"])
            kt = matmul(c_emb, p[f"{lp}.cross.wk"])
            vt = matmul(c_emb, p[f"{lp}.cross.wv"])
            combined = multihead_attention(q, kt, vt, cfg.heads)
            if adapters.dca is not None and i in adapted:
                from .dca import dca_residual
                dw = {k: adapters.dca[f"dca.l{i}.{k}"] for k in ("wq", "wk", "wv")}
                combined = add(combined, dca_residual(
                    xn, q, kt, vt, token_mask, dw, cfg.heads))
            if adapters.rpa is not None and i in adapted:
                from .rpa import rpa_residual
                if adapters.refs is None or i not in adapters.refs:
                    raise ContractError(f"missing reference features for layer {i}")
                rw = {k: adapters.rpa[f"rpa.l{i}.{k}"] for k in ("wk", "wv")}
                combined = add(combined, rpa_residual(
                    q, rw, adapters.refs[i], cfg.heads))
            ca = matmul(combined, p[f"{lp}.cross.wo"])
            if capture is not None:
                capture[f"cross_attn.{i}"] = value(ca)
            x = add(x, ca)
            # feed-forward
            xn = layer_norm(x)
            ff = matmul(gelu(matmul(xn, p[f"{lp}.ffn.w1"])), p[f"{lp}.ffn.w2"])
            x = add(x, ff)

        out = matmul(layer_norm(x), p["base.out.proj"])
        return cells_to_image(out, b, cfg.channels, rows, cols, cfg.token_size)


def bind_params(store: ParameterStore, tape=None, trainable: list[str] | None = None) -> dict:
    """Store -> name->tensor mapping; trainable names become tape leaves."""
    trainable = set(trainable or [])
    out = {}
    for name in store.names():
        if name in trainable:
            if tape is None:
                raise ContractError("trainable parameters need a tape")
            out[name] = tape.leaf(store.get(name))
        else:
            out[name] = store.get(name)
    return out


def pretrain_base(records, config: DenoiserConfig, steps: int, seed: int,
                  schedule=None, train_cfg=None):
    """Train a fresh backbone on masked-inpainting noise prediction.

    Returns (store, loss history); every tensor in the store is marked
    frozen, ready to serve as the fixed base for adapter training.  With
    steps = 0 the freshly initialized weights are returned unchanged.
    """
    from .diffusion import make_schedule
    from .training import TrainConfig, run_training

    if not records:
        raise ContractError("pretraining needs a nonempty dataset")
    schedule = schedule or make_schedule(100)
    cfg = train_cfg or TrainConfig(lr=3e-4)
    cfg.steps = steps
    store = init_base_params(config, seed)
    history = run_training(store, store.names("base."), records, config,
                           schedule, cfg, seed)
    store.freeze_all()
    return store, history


def encode_text(prompt_ids: list[int], store: ParameterStore,
                config: DenoiserConfig) -> TextEmbedding:
    """Single-prompt embedding with padding flags (empty prompt = all pad)."""
    ids = pad_prompt(list(prompt_ids), config.max_prompt)
    model = Denoiser(config, {n: store.get(n) for n in store.names("base.text")})
    vecs = model.encode_text(ids[None])
    return TextEmbedding(vectors=value(vecs)[0], padding=ids == vocab.PAD_ID)


def token_lookup(prompt_ids: list[int], store: ParameterStore,
                 config: DenoiserConfig) -> np.ndarray:
    """Pre-positional table rows for a prompt (diagnostic helper)."""
    ids = pad_prompt(list(prompt_ids), config.max_prompt)
    return store.get("base.text.table")[ids]

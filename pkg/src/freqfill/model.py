"""Toy multimodal diffusion transformer over merged condition/latent tokens.

Three visual segments (masked scene, product reference, noisy latent) plus a
short text sequence share one attention space. Dual blocks optionally run a
second pass over high-frequency-conditioned tokens with the same weights,
gated per block by a learnable scalar and restricted to masked latent
positions. All output projections start at zero so every block is the
identity at initialization.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .spectral import HighPassConfig, extract_hf, luma
from .tensor import Tensor

Array = np.ndarray

CKPT_MAGIC = b"HIFI"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64
    heads: int = 4
    n_single: int = 2
    n_dual: int = 2
    text_len: int = 16
    vocab: int = 64
    mlp_ratio: int = 4
    use_sea: bool = True
    rope_base: float = 100.0
    time_features: int = 64

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ContractViolation("patch size must divide image size")
        if self.dim % self.heads != 0:
            raise ContractViolation("heads must divide dim")
        if (self.dim // self.heads) % 4 != 0:
            raise ContractViolation("head dim must be a multiple of 4 for 2-axis rotary")
        if self.dim < self.patch_dim:
            raise ContractViolation("dim must be >= channels*patch^2 for an invertible encoder")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def seg_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def visual_tokens(self) -> int:
        return 3 * self.seg_tokens


# ---------------------------------------------------------------------------
# Patch rearrangement (exact, invertible)


def patchify(image: Array, p: int) -> Array:
    """Space-to-depth: (H, W, C) -> (HW/p^2, C*p^2), lossless."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h % p or w % p:
        raise ContractViolation(f"patch size {p} must divide image dims {h}x{w}")
    gh, gw = h // p, w // p
    return (
        img.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)
    )


def unpatchify(tokens: Array, p: int, h: int, w: int, c: int) -> Array:
    """Exact inverse of :func:`patchify`."""
    tok = np.asarray(tokens)
    gh, gw = h // p, w // p
    if tok.shape != (gh * gw, p * p * c):
        raise ContractViolation(f"token shape {tok.shape} does not match {h}x{w}x{c}/p={p}")
    return tok.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def unpatchify_op(tokens: Tensor, p: int, h: int, w: int, c: int) -> Tensor:
    """Tape-side inverse rearrangement for a batch: (B, T, p*p*c) -> (B, H, W, C)."""
    b = tokens.shape[0]
    gh, gw = h // p, w // p
    t = T.reshape(tokens, (b, gh, gw, p, p, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b, h, w, c))


def downsample_mask(mask: Array, p: int) -> Array:
    """Patch-grid mask: a cell is set iff any pixel of its patch is masked."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    if h % p or w % p:
        raise ContractViolation(f"patch size {p} must divide mask dims {h}x{w}")
    return m.reshape(h // p, p, w // p, p).any(axis=(1, 3))


# ---------------------------------------------------------------------------
# Parameters


def _qr_rows(rng: np.random.Generator, rows: int, cols: int) -> Array:
    """Matrix with orthonormal rows (rows <= cols), sign-fixed for determinism."""
    a = rng.standard_normal((cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.astype(np.float32)


def _stream_param_specs(dim: int, mlp_ratio: int, tdim: int) -> list[tuple[str, tuple[int, ...], str]]:
    hidden = dim * mlp_ratio
    return [
        ("norm1.g", (dim,), "ones"),
        ("attn.wqkv", (dim, 3 * dim), "normal"),
        ("attn.bqkv", (3 * dim,), "zeros"),
        ("attn.wo", (dim, dim), "zeros"),
        ("attn.bo", (dim,), "zeros"),
        ("norm2.g", (dim,), "ones"),
        ("mlp.w1", (dim, hidden), "normal"),
        ("mlp.b1", (hidden,), "zeros"),
        ("mlp.w2", (hidden, dim), "zeros"),
        ("mlp.b2", (dim,), "zeros"),
        ("mod.w", (tdim, 4 * dim), "zeros"),
        ("mod.b", (4 * dim,), "zeros"),
    ]


class ModelState:
    """All named parameters plus the static config.

    The patch encoder/decoder pair is initialized as an exact inverse
    (orthonormal rows / their transpose) and is excluded from optimization by
    default, mirroring a frozen pretrained image codec.
    """

    FROZEN = ("patch_embed.w", "patch_unembed.w")

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._rope_cache: dict[str, tuple[Array, Array]] = {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelState":
        rng = np.random.default_rng(seed)
        d, td = config.dim, config.time_features
        params: dict[str, Array] = {}

        w = _qr_rows(rng, config.patch_dim, d)
        params["patch_embed.w"] = w
        params["patch_unembed.w"] = w.T.copy()
        params["text_embed"] = (0.02 * rng.standard_normal((config.vocab, d))).astype(np.float32)
        params["time_mlp.w1"] = (0.02 * rng.standard_normal((td, d))).astype(np.float32)
        params["time_mlp.b1"] = np.zeros(d, dtype=np.float32)
        params["time_mlp.w2"] = (0.02 * rng.standard_normal((d, d))).astype(np.float32)
        params["time_mlp.b2"] = np.zeros(d, dtype=np.float32)

        def fill(prefix: str):
            for name, shape, kind in _stream_param_specs(d, config.mlp_ratio, d):
                if kind == "normal":
                    arr = (0.02 * rng.standard_normal(shape)).astype(np.float32)
                elif kind == "ones":
                    arr = np.ones(shape, dtype=np.float32)
                else:
                    arr = np.zeros(shape, dtype=np.float32)
                params[f"{prefix}.{name}"] = arr

        for i in range(config.n_single):
            fill(f"single{i}.txt")
            fill(f"single{i}.vis")
        for i in range(config.n_dual):
            fill(f"dual{i}.txt")
            fill(f"dual{i}.vis")
            if config.use_sea:
                params[f"sea_alpha.{i}"] = np.zeros((), dtype=np.float32)

        params["head.norm.g"] = np.ones(d, dtype=np.float32)
        params["head.w"] = np.zeros((d, d), dtype=np.float32)
        params["head.b"] = np.zeros(d, dtype=np.float32)

        return cls(config, {k: T.parameter(v) for k, v in params.items()})

    def scalar_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable_names(self) -> list[str]:
        return sorted(k for k in self.params if k not in self.FROZEN)

    def astype(self, dtype) -> "ModelState":
        cloned = {
            k: Tensor(p.data.astype(dtype), requires_grad=True, dtype=dtype)
            for k, p in self.params.items()
        }
        return ModelState(self.config, cloned)

    # -- rotary tables ------------------------------------------------------

    def rope_tables(self, dtype=np.float32) -> tuple[Array, Array]:
        key = np.dtype(dtype).name
        if key not in self._rope_cache:
            cfg = self.config
            hd = cfg.dim // cfg.heads
            quarter = hd // 4
            freqs = cfg.rope_base ** (-np.arange(quarter) / quarter)
            rows, cols = [], []
            for i in range(cfg.text_len):
                rows.append(0)
                cols.append(i)
            # each visual segment gets a disjoint row range; row 0 is text-only
            for seg in range(3):
                off = 1 + seg * (cfg.grid + 1)
                for gy in range(cfg.grid):
                    for gx in range(cfg.grid):
                        rows.append(off + gy)
                        cols.append(gx)
            rows_a = np.asarray(rows, dtype=np.float64)[:, None] * freqs[None, :]
            cols_a = np.asarray(cols, dtype=np.float64)[:, None] * freqs[None, :]
            ang = np.concatenate([rows_a, cols_a], axis=1)  # (T, hd/2)
            cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(dtype)
            sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1).astype(dtype)
            self._rope_cache[key] = (cos, sin)
        return self._rope_cache[key]


def count_params(config: ModelConfig) -> int:
    return ModelState.init(config, seed=0).scalar_count()


# ---------------------------------------------------------------------------
# Token construction


@dataclass
class TokenBatch:
    """Segmented visual token sequence plus text ids and noise bookkeeping."""

    visual: Tensor  # (B, 3*seg, d)
    text_ids: Array  # (B, text_len) int
    segment_lengths: tuple[int, int, int]
    grid: tuple[int, int]
    tags: tuple[str, str, str]
    x0: Tensor  # clean latent tokens (B, seg, d)
    eps: Array  # (B, seg, d)
    t: Array  # (B,)

    def segment(self, index: int) -> Tensor:
        start = sum(self.segment_lengths[:index])
        return T.narrow(self.visual, 1, start, self.segment_lengths[index])


def encode_image(state: ModelState, image: Array) -> Tensor:
    """Toy encoder: exact patch rearrangement then a linear projection."""
    cfg = state.config
    w = state.params["patch_embed.w"]
    patches = patchify(image, cfg.patch).astype(w.dtype)[None]
    return T.matmul(T.constant(patches, dtype=w.dtype), w)


def encode_batch(state: ModelState, patches: Array) -> Tensor:
    w = state.params["patch_embed.w"]
    return T.matmul(T.constant(patches.astype(w.dtype), dtype=w.dtype), w)


def decode_tokens(state: ModelState, tokens: Tensor) -> Tensor:
    """Inverse of the toy encoder: linear unprojection, exact un-rearrangement."""
    cfg = state.config
    u = state.params["patch_unembed.w"]
    flat = T.matmul(tokens, u)
    return unpatchify_op(flat, cfg.patch, cfg.image_size, cfg.image_size, cfg.channels)


def hf_condition_image(image: Array, cfg: HighPassConfig) -> Array:
    """Dataset-side detail map of the reference image, replicated to 3 channels."""
    hf = extract_hf(luma(np.asarray(image, dtype=np.float64)), cfg)
    return np.repeat(hf[:, :, None], 3, axis=2).astype(np.float32)


def _noisy_latent(x0: Tensor, t: Array, eps: Array) -> Tensor:
    tt = np.asarray(t, dtype=x0.dtype).reshape(-1, 1, 1)
    keep = T.mul(x0, T.constant(1.0 - tt, dtype=x0.dtype))
    return T.add(keep, T.constant(np.asarray(eps, dtype=x0.dtype) * tt, dtype=x0.dtype))


def _token_batch(
    state: ModelState,
    human: Array,
    middle: Array,
    gt: Array,
    t: float | Array,
    eps: Array,
    text_ids: Array,
    middle_tag: str,
) -> TokenBatch:
    cfg = state.config
    for img in (human, middle, gt):
        if np.asarray(img).shape != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ContractViolation(
                f"image shape {np.asarray(img).shape} does not match the model config"
            )
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractViolation("t must lie in [0, 1]")
    e_h = encode_image(state, human)
    e_m = encode_image(state, middle)
    x0 = encode_image(state, gt)
    eps = np.asarray(eps, dtype=np.float32)
    if eps.ndim == 2:
        eps = eps[None]
    if eps.shape != x0.shape:
        raise ContractViolation(f"noise shape {eps.shape} != latent shape {x0.shape}")
    noisy = _noisy_latent(x0, t_arr, eps)
    visual = T.concat([e_h, e_m, noisy], axis=1)
    s = cfg.seg_tokens
    return TokenBatch(
        visual=visual,
        text_ids=np.asarray(text_ids, dtype=np.int64).reshape(1, -1),
        segment_lengths=(s, s, s),
        grid=(cfg.grid, cfg.grid),
        tags=("human", middle_tag, "noisy"),
        x0=x0,
        eps=eps,
        t=t_arr,
    )


def build_joint_tokens(
    state: ModelState,
    human: Array,
    product: Array,
    gt: Array,
    t: float,
    eps: Array,
    text_ids: Array | None = None,
) -> TokenBatch:
    ids = np.zeros(state.config.text_len, dtype=np.int64) if text_ids is None else text_ids
    return _token_batch(state, human, product, gt, t, eps, ids, "product")


def build_hf_tokens(
    state: ModelState,
    human: Array,
    product: Array,
    gt: Array,
    t: float,
    eps: Array,
    hp_cfg: HighPassConfig | None = None,
    text_ids: Array | None = None,
) -> TokenBatch:
    hp_cfg = hp_cfg or HighPassConfig(radius_fraction=0.1, normalize="minmax")
    ids = np.zeros(state.config.text_len, dtype=np.int64) if text_ids is None else text_ids
    hf = hf_condition_image(product, hp_cfg)
    return _token_batch(state, human, hf, gt, t, eps, ids, "product_hf")


def build_token_pair(
    state: ModelState,
    human: Array,
    product: Array,
    gt: Array,
    t: float | Array,
    eps: Array,
    hp_cfg: HighPassConfig,
    text_ids: Array,
) -> tuple[TokenBatch, TokenBatch]:
    """Joint and high-frequency token batches sharing segments 1 and 3."""
    z0 = _token_batch(state, human, product, gt, t, eps, text_ids, "product")
    hf = hf_condition_image(product, hp_cfg)
    e_hf = encode_image(state, hf)
    visual_hf = T.concat([z0.segment(0), e_hf, z0.segment(2)], axis=1)
    z0p = TokenBatch(
        visual=visual_hf,
        text_ids=z0.text_ids,
        segment_lengths=z0.segment_lengths,
        grid=z0.grid,
        tags=("human", "product_hf", "noisy"),
        x0=z0.x0,
        eps=z0.eps,
        t=z0.t,
    )
    return z0, z0p


# ---------------------------------------------------------------------------
# Blocks


def _sinusoidal_features(t: Array, n: int, dtype) -> Array:
    half = n // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def time_embedding(state: ModelState, t: Array) -> Tensor:
    p = state.params
    feats = T.constant(
        _sinusoidal_features(t, state.config.time_features, p["time_mlp.w1"].dtype)
    )
    h = T.add(T.matmul(feats, p["time_mlp.w1"]), _row(p["time_mlp.b1"]))
    h = T.gelu(h)
    return T.add(T.matmul(h, p["time_mlp.w2"]), _row(p["time_mlp.b2"]))


def _row(bias: Tensor) -> Tensor:
    return T.reshape(bias, (1, bias.shape[0]))


def _rotate_half(x: Tensor) -> Tensor:
    hd = x.shape[-1]
    a = T.narrow(x, x.ndim - 1, 0, hd // 2)
    b = T.narrow(x, x.ndim - 1, hd // 2, hd // 2)
    return T.concat([T.scale(b, -1.0), a], axis=x.ndim - 1)


def _apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    return T.add(T.mul(x, cos), T.mul(_rotate_half(x), sin))


def _heads_split(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _heads_join(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int, cos: Tensor, sin: Tensor) -> Tensor:
    qh = _apply_rope(_heads_split(q, heads), cos, sin)
    kh = _apply_rope(_heads_split(k, heads), cos, sin)
    vh = _heads_split(v, heads)
    hd = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    return _heads_join(T.matmul(T.softmax(scores, axis=-1), vh))


def _modulated(x: Tensor, norm_gain: Tensor, scale_m: Tensor, shift_m: Tensor) -> Tensor:
    h = T.rmsnorm(x, norm_gain)
    return T.add(T.add(h, T.mul(h, scale_m)), shift_m)


def _mod_params(p: dict[str, Tensor], prefix: str, t_emb: Tensor, d: int) -> tuple[Tensor, ...]:
    m = T.add(T.matmul(t_emb, p[f"{prefix}.mod.w"]), _row(p[f"{prefix}.mod.b"]))
    b = m.shape[0]
    m = T.reshape(m, (b, 1, 4 * d))
    return tuple(T.narrow(m, 2, i * d, d) for i in range(4))


def _qkv(p: dict[str, Tensor], prefix: str, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    d = h.shape[-1]
    qkv = T.add(T.matmul(h, p[f"{prefix}.attn.wqkv"]), _row(p[f"{prefix}.attn.bqkv"]))
    return tuple(T.narrow(qkv, 2, i * d, d) for i in range(3))


def _proj_out(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, p[f"{prefix}.attn.wo"]), _row(p[f"{prefix}.attn.bo"]))


def _mlp(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, p[f"{prefix}.mlp.w1"]), _row(p[f"{prefix}.mlp.b1"])))
    return T.add(T.matmul(h, p[f"{prefix}.mlp.w2"]), _row(p[f"{prefix}.mlp.b2"]))


def _self_block(
    p: dict[str, Tensor], prefix: str, x: Tensor, t_emb: Tensor, cos: Tensor, sin: Tensor, heads: int
) -> Tensor:
    d = x.shape[-1]
    s1, h1, s2, h2 = _mod_params(p, prefix, t_emb, d)
    hmod = _modulated(x, p[f"{prefix}.norm1.g"], s1, h1)
    q, k, v = _qkv(p, prefix, hmod)
    x = T.add(x, _proj_out(p, prefix, _attention(q, k, v, heads, cos, sin)))
    hmod2 = _modulated(x, p[f"{prefix}.norm2.g"], s2, h2)
    return T.add(x, _mlp(p, prefix, hmod2))


def single_block(
    state: ModelState, index: int, text: Tensor, visual: Tensor, t_emb: Tensor
) -> tuple[Tensor, Tensor]:
    """Separate self-attention stacks for the text and visual streams."""
    if text.shape[-1] != visual.shape[-1]:
        raise ContractViolation("text and visual widths must match")
    cfg = state.config
    cos_t, sin_t, cos_v, sin_v, _, _ = _rope_slices(state, text.shape[1], visual.shape[1], text.dtype)
    new_text = _self_block(state.params, f"single{index}.txt", text, t_emb, cos_t, sin_t, cfg.heads)
    new_vis = _self_block(state.params, f"single{index}.vis", visual, t_emb, cos_v, sin_v, cfg.heads)
    return new_text, new_vis


def _rope_slices(state: ModelState, n_text: int, n_vis: int, dtype):
    cos, sin = state.rope_tables(dtype)
    if n_text + n_vis > cos.shape[0]:
        raise ContractViolation("token count exceeds the positional table")
    cos_t = T.constant(cos[:n_text][None, None], dtype=dtype)
    sin_t = T.constant(sin[:n_text][None, None], dtype=dtype)
    cos_v = T.constant(cos[n_text : n_text + n_vis][None, None], dtype=dtype)
    sin_v = T.constant(sin[n_text : n_text + n_vis][None, None], dtype=dtype)
    cos_j = T.constant(cos[: n_text + n_vis][None, None], dtype=dtype)
    sin_j = T.constant(sin[: n_text + n_vis][None, None], dtype=dtype)
    return cos_t, sin_t, cos_v, sin_v, cos_j, sin_j


def dual_block(
    state: ModelState, index: int, text: Tensor, visual: Tensor, t_emb: Tensor
) -> tuple[Tensor, Tensor]:
    """Joint attention over text+visual with stream-specific projections."""
    if text.shape[-1] != visual.shape[-1]:
        raise ContractViolation("text and visual widths must match")
    cfg, p = state.config, state.params
    d = text.shape[-1]
    n_text = text.shape[1]
    *_, cos_j, sin_j = _rope_slices(state, n_text, visual.shape[1], text.dtype)

    pt, pv = f"dual{index}.txt", f"dual{index}.vis"
    ts1, th1, ts2, th2 = _mod_params(p, pt, t_emb, d)
    vs1, vh1, vs2, vh2 = _mod_params(p, pv, t_emb, d)
    h_t = _modulated(text, p[f"{pt}.norm1.g"], ts1, th1)
    h_v = _modulated(visual, p[f"{pv}.norm1.g"], vs1, vh1)
    qt, kt, vt = _qkv(p, pt, h_t)
    qv, kv, vv = _qkv(p, pv, h_v)
    joint = _attention(
        T.concat([qt, qv], axis=1),
        T.concat([kt, kv], axis=1),
        T.concat([vt, vv], axis=1),
        cfg.heads,
        cos_j,
        sin_j,
    )
    attn_t = T.narrow(joint, 1, 0, n_text)
    attn_v = T.narrow(joint, 1, n_text, visual.shape[1])
    text = T.add(text, _proj_out(p, pt, attn_t))
    visual = T.add(visual, _proj_out(p, pv, attn_v))
    text = T.add(text, _mlp(p, pt, _modulated(text, p[f"{pt}.norm2.g"], ts2, th2)))
    visual = T.add(visual, _mlp(p, pv, _modulated(visual, p[f"{pv}.norm2.g"], vs2, vh2)))
    return text, visual


def sea_mask_vector(state: ModelState, m_ds: Array, dtype) -> Array:
    """0/1 gate over visual token positions: only masked noisy-latent cells pass."""
    cfg = state.config
    m = np.asarray(m_ds, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape[-2:] != (cfg.grid, cfg.grid):
        raise ContractViolation(f"downsampled mask shape {m.shape} != grid {cfg.grid}")
    b = m.shape[0]
    vec = np.zeros((b, cfg.visual_tokens, 1), dtype=dtype)
    vec[:, 2 * cfg.seg_tokens :, 0] = m.reshape(b, -1).astype(dtype)
    return vec


def sea_forward(
    state: ModelState,
    index: int,
    z_prev: Tensor,
    zp_prev: Tensor,
    text: Tensor,
    text_p: Tensor,
    t_emb: Tensor,
    m_ds: Array,
    capture: dict | None = None,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One dual block with the gated second pass over high-frequency tokens.

    Both passes reuse the block's weights; the second pass contributes only at
    masked noisy-latent positions, scaled by this block's gate, and otherwise
    continues untouched down its own stream.
    """
    if zp_prev.shape != z_prev.shape:
        raise ContractViolation("joint and high-frequency streams must share segmentation")
    text_new, z_main = dual_block(state, index, text, z_prev, t_emb)
    text_p_new, zp_new = dual_block(state, index, text_p, zp_prev, t_emb)
    gate_vec = sea_mask_vector(state, m_ds, z_main.dtype)
    masked = _masked_branch(zp_new, gate_vec, capture, index)
    alpha = state.params[f"sea_alpha.{index}"]
    contribution = T.mul(masked, T.reshape(alpha, (1, 1, 1)))
    z_new = T.add(z_main, contribution)
    if capture is not None:
        capture.setdefault("sea_premask", {})[index] = zp_new
    return z_new, zp_new, text_new, text_p_new


def _masked_branch(x: Tensor, gate_vec: Array, capture: dict | None, index: int) -> Tensor:
    out = T._wrap(x.data * gate_vec)

    def bw(g):
        gi = g * gate_vec
        if capture is not None:
            capture.setdefault("mask_grads", {})[index] = gi
        return (gi,)

    return T._record(out, (x,), bw)


def model_forward(
    state: ModelState,
    z0: TokenBatch,
    z0p: TokenBatch | None,
    t: Array,
    m_ds: Array,
    capture: dict | None = None,
) -> Tensor:
    """Velocity prediction over the noisy-latent token grid."""
    cfg, p = state.config, state.params
    t_emb = time_embedding(state, np.atleast_1d(t))
    text = T.embedding(p["text_embed"], z0.text_ids)
    visual = z0.visual
    for i in range(cfg.n_single):
        text, visual = single_block(state, i, text, visual, t_emb)
    use_sea = cfg.use_sea and z0p is not None
    if use_sea:
        # the high-frequency stream enters the dual stage raw; its text copy
        # is the main stream's text as refined so far
        text_p, visual_p = text, z0p.visual
    for i in range(cfg.n_dual):
        if use_sea:
            visual, visual_p, text, text_p = sea_forward(
                state, i, visual, visual_p, text, text_p, t_emb, m_ds, capture
            )
        else:
            text, visual = dual_block(state, i, text, visual, t_emb)
    noisy = T.narrow(visual, 1, 2 * cfg.seg_tokens, cfg.seg_tokens)
    out = T.rmsnorm(noisy, p["head.norm.g"])
    return T.add(T.matmul(out, p["head.w"]), _row(p["head.b"]))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str, state: ModelState, extras: dict | None = None) -> None:
    """Binary format: magic, u32 version, u32 header length, JSON header, then
    raw little-endian float32 blobs in manifest order."""
    names = sorted(state.params)
    header = {
        "config": asdict(state.config),
        "extras": extras or {},
        "manifest": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = b"".join(
        np.ascontiguousarray(state.params[n].data.astype("<f4")).tobytes() for n in names
    )
    payload = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<I", len(blob)) + blob + body
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelState, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ContractViolation("not a model checkpoint (bad magic)")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != CKPT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    hlen = struct.unpack("<I", buf[8:12])[0]
    header = json.loads(buf[12 : 12 + hlen].decode())
    config = ModelConfig(**header["config"])
    params: dict[str, Tensor] = {}
    pos = 12 + hlen
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        params[entry["name"]] = T.parameter(arr)
        pos += 4 * n
    return ModelState(config, params), header["extras"]

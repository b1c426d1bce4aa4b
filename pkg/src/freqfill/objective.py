"""Flow-matching corruption, clean-sample reconstruction, and the training
losses: latent MSE plus masked high-frequency pixel supervision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .model import (
    ModelState,
    TokenBatch,
    build_token_pair,
    decode_tokens,
    downsample_mask,
    model_forward,
)
from .spectral import LUMA_WEIGHTS, HighPassConfig, extract_hf, extract_hf_op, luma
from .tensor import Tensor

Array = np.ndarray


@dataclass
class NoisySample:
    """Linear-path corruption state: x_t = (1-t)·x0 + t·eps, target eps - x0."""

    x0: Tensor
    eps: Array
    t: Array
    x_t: Tensor
    v_target: Tensor


def make_noisy(x0: Tensor, t: float | Array, eps: Array) -> NoisySample:
    eps = np.asarray(eps, dtype=x0.dtype)
    if eps.shape != x0.shape:
        raise ContractViolation(f"noise shape {eps.shape} != {x0.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractViolation("t must lie in [0, 1]")
    tt = t_arr.astype(x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
    x_t = T.add(T.mul(x0, T.constant(1.0 - tt, dtype=x0.dtype)), T.constant(eps * tt, dtype=x0.dtype))
    v_target = T.sub(T.constant(eps, dtype=x0.dtype), x0)
    return NoisySample(x0=x0, eps=eps, t=t_arr, x_t=x_t, v_target=v_target)


def predict_x0(x_t: Tensor, v_hat: Tensor, t: float | Array) -> Tensor:
    """Invert the linear path: x0 = x_t - t·v; exact when v is the true velocity."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractViolation("t must lie in [0, 1]")
    tt = t_arr.astype(x_t.dtype).reshape((-1,) + (1,) * (x_t.ndim - 1))
    return T.sub(x_t, T.mul(v_hat, T.constant(tt, dtype=x_t.dtype)))


def loss_mse(v_hat: Tensor, v_target: Tensor) -> Tensor:
    if v_hat.shape != v_target.shape:
        raise ContractViolation(f"shape mismatch {v_hat.shape} vs {v_target.shape}")
    d = T.sub(v_hat, v_target)
    return T.mean_(T.mul(d, d))


@dataclass
class DaLossResult:
    value: Tensor
    empty_mask: bool


def loss_da(
    pred: Tensor, gt: Array, mask: Array, cfg: HighPassConfig
) -> DaLossResult:
    """Masked high-frequency squared error, averaged over masked pixels.

    The filter runs on the mask-restricted content of both images, so pixels
    outside the mask cannot influence the value at all (the filter itself is
    global). ``pred`` is a grayscale plane (or a batch of them) on the tape;
    ``gt`` and ``mask`` are data. An empty mask yields 0 with a diagnostic
    flag rather than an error.
    """
    if cfg.normalize != "none":
        raise ContractViolation("the detail loss requires normalize='none'")
    gt = np.asarray(gt)
    m = np.asarray(mask, dtype=bool)
    if pred.ndim == 2:
        pred = T.reshape(pred, (1,) + pred.shape)
    if gt.ndim == 2:
        gt = gt[None]
    if m.ndim == 2:
        m = m[None]
    if pred.shape != gt.shape or m.shape != gt.shape:
        raise ContractViolation(
            f"prediction {pred.shape}, target {gt.shape}, mask {m.shape} must agree"
        )
    counts = m.reshape(m.shape[0], -1).sum(axis=1)
    empty = bool(np.any(counts == 0))

    mf = m.astype(pred.dtype)
    mask_t = T.constant(mf, dtype=pred.dtype)
    hf_pred = extract_hf_op(T.mul(pred, mask_t), cfg)
    hf_gt = np.stack([extract_hf(g, cfg) for g in gt * mf]).astype(pred.dtype)
    diff = T.sub(T.mul(hf_pred, mask_t), T.constant(hf_gt * mf, dtype=pred.dtype))
    per_sample = T.sum_(T.mul(diff, diff), axis=(1, 2))
    inv_counts = (1.0 / np.maximum(counts, 1)).astype(pred.dtype)
    value = T.mean_(T.mul(per_sample, T.constant(inv_counts, dtype=pred.dtype)))
    return DaLossResult(value=value, empty_mask=empty)


@dataclass
class LossReport:
    l_mse: float
    l_da: float
    l_overall: float
    lambda_da: float
    da_empty_mask: bool = False


@dataclass
class TrainBatch:
    """One optimization step's inputs, fully materialized."""

    human: Array  # (B, H, W, C)
    product: Array
    gt: Array
    mask: Array  # (B, H, W) bool
    text_ids: Array  # (B, text_len)
    t: Array  # (B,)
    eps: Array  # (B, seg, d)


def luma_op(img: Tensor) -> Tensor:
    b, h, w, c = img.shape
    wl = T.constant(LUMA_WEIGHTS.reshape(c, 1), dtype=img.dtype)
    flat = T.reshape(img, (b, h * w, c))
    return T.reshape(T.matmul(flat, wl), (b, h, w))


def loss_overall(
    state: ModelState,
    batch: TrainBatch,
    lambda_da: float = 1.0,
    hp_cfg: HighPassConfig | None = None,
    use_dal: bool = True,
    velocity_fn: Callable | None = None,
    capture: dict | None = None,
) -> tuple[Tensor, LossReport]:
    """Compose the model, the latent MSE, and the masked detail loss.

    ``velocity_fn`` (x_t, noisy, z0, z0p) -> Tensor substitutes the network
    when testing against oracle velocities.
    """
    cfg = state.config
    b = batch.gt.shape[0]
    hp_raw = HighPassConfig(
        radius_fraction=(hp_cfg.radius_fraction if hp_cfg else 0.1), normalize="none"
    )
    hp_cond = HighPassConfig(radius_fraction=hp_raw.radius_fraction, normalize="minmax")

    z0_parts, z0p_parts, noisy_parts = [], [], []
    m_ds = np.stack([downsample_mask(m, cfg.patch) for m in batch.mask])
    for i in range(b):
        z0_i, z0p_i = build_token_pair(
            state,
            batch.human[i],
            batch.product[i],
            batch.gt[i],
            batch.t[i],
            batch.eps[i],
            hp_cond,
            batch.text_ids[i],
        )
        z0_parts.append(z0_i.visual)
        z0p_parts.append(z0p_i.visual)
        noisy_parts.append(z0_i.x0)

    visual = T.concat(z0_parts, axis=0) if b > 1 else z0_parts[0]
    visual_p = T.concat(z0p_parts, axis=0) if b > 1 else z0p_parts[0]
    x0 = T.concat(noisy_parts, axis=0) if b > 1 else noisy_parts[0]
    ns = make_noisy(x0, batch.t, np.asarray(batch.eps, dtype=np.float32))

    s = cfg.seg_tokens
    z0 = TokenBatch(
        visual=visual,
        text_ids=np.asarray(batch.text_ids, dtype=np.int64),
        segment_lengths=(s, s, s),
        grid=(cfg.grid, cfg.grid),
        tags=("human", "product", "noisy"),
        x0=x0,
        eps=batch.eps,
        t=ns.t,
    )
    z0p = TokenBatch(
        visual=visual_p,
        text_ids=z0.text_ids,
        segment_lengths=z0.segment_lengths,
        grid=z0.grid,
        tags=("human", "product_hf", "noisy"),
        x0=x0,
        eps=batch.eps,
        t=ns.t,
    )

    if velocity_fn is not None:
        v_hat = velocity_fn(ns.x_t, ns, z0, z0p)
    else:
        v_hat = model_forward(state, z0, z0p if cfg.use_sea else None, ns.t, m_ds, capture)

    l_mse = loss_mse(v_hat, ns.v_target)

    da_flag = False
    if use_dal and lambda_da > 0.0:
        x0_hat = predict_x0(ns.x_t, v_hat, ns.t)
        img_hat = decode_tokens(state, x0_hat)
        pred_luma = luma_op(img_hat)
        gt_luma = np.stack([luma(g) for g in np.asarray(batch.gt, dtype=np.float64)])
        da = loss_da(pred_luma, gt_luma.astype(np.float32), batch.mask, hp_raw)
        da_flag = da.empty_mask
        l_da = da.value
        total = T.add(l_mse, T.scale(l_da, lambda_da))
    else:
        l_da = T.constant(np.zeros((), dtype=l_mse.dtype))
        total = l_mse

    report = LossReport(
        l_mse=l_mse.item(),
        l_da=l_da.item(),
        l_overall=total.item(),
        lambda_da=float(lambda_da),
        da_empty_mask=da_flag,
    )
    return total, report

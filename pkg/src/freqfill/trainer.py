"""Optimization loop, checkpointing cadence, and the Euler flow sampler."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .model import (
    ModelConfig,
    ModelState,
    build_token_pair,
    decode_tokens,
    downsample_mask,
    model_forward,
    save_checkpoint,
)
from .objective import TrainBatch, loss_overall
from .spectral import HighPassConfig
from .tensor import GradTape, Tensor

Array = np.ndarray


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 300
    batch: int = 8
    seed: int = 0
    lambda_da: float = 1.0
    radius_fraction: float = 0.1
    use_sea: bool = True
    use_dal: bool = True
    use_synth_data: bool = True
    ckpt_every: int = 100
    # keep the enhancement gates at zero for the first K steps so the base
    # model trains undisturbed before the branch starts adapting on top of it
    sea_freeze_steps: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if self.steps < 1 or self.batch < 1:
            raise ContractViolation("steps and batch must be >= 1")
        if self.sea_freeze_steps < 0:
            raise ContractViolation("sea_freeze_steps must be >= 0")


@dataclass
class RunLogRecord:
    step: int
    l_mse: float
    l_da: float
    l_overall: float
    grad_norm: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class AdamWState:
    def __init__(self, names: Sequence[str], params: dict[str, Tensor]):
        self.m = {n: np.zeros_like(params[n].data) for n in names}
        self.v = {n: np.zeros_like(params[n].data) for n in names}
        self.step = 0
        self.skipped = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    cfg: TrainConfig,
    state: AdamWState,
) -> None:
    """Decoupled-weight-decay Adam with bias correction; skips non-finite steps."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data - cfg.lr * (update + cfg.weight_decay * p.data)


def _global_norm(grads: dict[str, Array]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


@dataclass
class TrainResult:
    state: ModelState
    log: list[RunLogRecord]
    optimizer: AdamWState


def _assemble_batch(dataset, idx: Array, t: Array, eps: Array, text_len: int) -> TrainBatch:
    return TrainBatch(
        human=np.stack([dataset[i].human for i in idx]),
        product=np.stack([dataset[i].product for i in idx]),
        gt=np.stack([dataset[i].gt for i in idx]),
        mask=np.stack([dataset[i].mask for i in idx]),
        text_ids=np.stack([dataset[i].tokens[:text_len] for i in idx]),
        t=t,
        eps=eps,
    )


def train(
    config: TrainConfig,
    dataset: Sequence,
    model_config: ModelConfig | None = None,
    out_dir: str | None = None,
    log_path: str | None = None,
    init_state: ModelState | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Deterministic training: fixed batch order and noise draws per seed.

    ``dataset`` items need ``human``, ``product``, ``gt``, ``mask`` and
    ``tokens`` attributes (see datagen.SampleRecord). Checkpoints are written
    every ``ckpt_every`` steps when ``out_dir`` is given. Passing a loaded
    ``init_state`` with the matching ``start_step`` fast-forwards the batch
    stream so a resumed run sees the same draws as an uninterrupted one.
    """
    if len(dataset) == 0:
        raise ContractViolation("training needs a non-empty dataset")
    model_config = model_config or ModelConfig(use_sea=config.use_sea)
    if model_config.use_sea != config.use_sea:
        model_config = ModelConfig(**{**asdict(model_config), "use_sea": config.use_sea})
    state = init_state if init_state is not None else ModelState.init(model_config, seed=config.seed)
    opt = AdamWState(state.trainable_names(), state.params)
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    n = len(dataset)
    seg, dim = model_config.seg_tokens, model_config.dim
    hp_cfg = HighPassConfig(radius_fraction=config.radius_fraction, normalize="none")
    for _ in range(start_step):  # replay the consumed draws
        rng.integers(0, n, size=config.batch)
        rng.random(config.batch)
        rng.standard_normal((config.batch, seg, dim), dtype=np.float32)

    log: list[RunLogRecord] = []
    # stream to a temp file, publish atomically on completion
    log_fh = open(f"{log_path}.tmp", "w") if log_path else None
    try:
        for step in range(start_step + 1, config.steps + 1):
            t0 = time.perf_counter()
            idx = rng.integers(0, n, size=config.batch)
            t_draw = rng.random(config.batch).astype(np.float32)
            eps = rng.standard_normal((config.batch, seg, dim), dtype=np.float32)
            batch = _assemble_batch(dataset, idx, t_draw, eps, model_config.text_len)
            with GradTape() as tape:
                loss, report = loss_overall(
                    state,
                    batch,
                    lambda_da=config.lambda_da,
                    hp_cfg=hp_cfg,
                    use_dal=config.use_dal,
                )
                tape.backward(loss)
            grads = {
                name: (state.params[name].grad
                       if state.params[name].grad is not None
                       else np.zeros_like(state.params[name].data))
                for name in state.trainable_names()
            }
            for p in state.params.values():
                p.grad = None
            if step <= config.sea_freeze_steps:
                for name in grads:
                    if name.startswith("sea_alpha."):
                        grads[name] = np.zeros_like(grads[name])
            adamw_step(state.params, grads, config, opt)
            rec = RunLogRecord(
                step=step,
                l_mse=report.l_mse,
                l_da=report.l_da,
                l_overall=report.l_overall,
                grad_norm=_global_norm(grads),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            log.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
            if out_dir and (step % config.ckpt_every == 0 or step == config.steps):
                os.makedirs(out_dir, exist_ok=True)
                save_checkpoint(
                    os.path.join(out_dir, f"step{step:06d}.hifi"),
                    state,
                    extras=_ckpt_extras(config, step),
                )
    finally:
        if log_fh:
            log_fh.close()
    if log_path:
        os.replace(f"{log_path}.tmp", log_path)
    return TrainResult(state=state, log=log, optimizer=opt)


def _ckpt_extras(config: TrainConfig, step: int) -> dict:
    extras = asdict(config)
    extras["betas"] = list(config.betas)
    extras["trained_steps"] = step
    return extras


def sample(
    state: ModelState,
    text_ids: Array,
    human: Array,
    product: Array,
    mask: Array,
    steps: int = 20,
    seed: int = 0,
    radius_fraction: float = 0.1,
    velocity_fn: Callable | None = None,
) -> Array:
    """Euler integration of the learned flow from t=1 to t=0.

    Conditions stay fixed; only the noisy segment is updated. The output is
    clamped to [0, 1] and composited so pixels outside the mask come from the
    masked scene image unchanged.
    """
    if steps < 1:
        raise ContractViolation("sampler needs steps >= 1")
    cfg = state.config
    rng = np.random.default_rng(np.random.PCG64(seed))
    eps = rng.standard_normal((1, cfg.seg_tokens, cfg.dim), dtype=np.float32)
    hp_cond = HighPassConfig(radius_fraction=radius_fraction, normalize="minmax")
    m_ds = downsample_mask(np.asarray(mask, dtype=bool), cfg.patch)[None]
    gt_stub = np.zeros((cfg.image_size, cfg.image_size, cfg.channels), dtype=np.float32)

    # conditions are encoded once; only the noisy slot changes per step
    z0, z0p = build_token_pair(
        state, human, product, gt_stub, 1.0, np.zeros_like(eps[0]), hp_cond,
        np.asarray(text_ids, dtype=np.int64),
    )
    cond_h, cond_p, cond_hf = z0.segment(0), z0.segment(1), z0p.segment(1)

    x = eps.copy()
    dt = 1.0 / steps
    for k in range(steps):
        t_k = 1.0 - k * dt
        cur = T.constant(x.astype(np.float32))
        z0.visual = T.concat([cond_h, cond_p, cur], axis=1)
        z0p.visual = T.concat([cond_h, cond_hf, cur], axis=1)
        if velocity_fn is not None:
            v = velocity_fn(x, t_k)
        else:
            v = model_forward(
                state, z0, z0p if cfg.use_sea else None, np.array([t_k]), m_ds
            ).data
        x = x - dt * np.asarray(v, dtype=np.float32)

    final = decode_tokens(state, T.constant(x.astype(np.float32))).data[0]
    final = np.clip(final, 0.0, 1.0)
    m3 = np.asarray(mask, dtype=bool)[:, :, None]
    out = np.where(m3, final, np.asarray(human, dtype=np.float32))
    return out.astype(np.float32)

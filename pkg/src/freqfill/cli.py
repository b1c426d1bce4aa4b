"""Command-line front end; one subcommand per pipeline stage.

Numpy-heavy modules are imported lazily inside handlers so HIFI_THREADS can
cap BLAS parallelism before numpy loads. Exit codes: 0 success, 1 contract
violation or usage error, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("HIFI_THREADS", "").strip()
    if cap and cap != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqfill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a filtered synthetic dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--sem-th", type=float, default=0.85)
    p.add_argument("--txt-th", type=float, default=0.8)
    p.add_argument("--corrupt", type=float, default=0.0)
    p.add_argument("--keep-failed", action="store_true")

    p = sub.add_parser("filter", help="re-threshold an existing manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sem-th", type=float, default=0.85)
    p.add_argument("--txt-th", type=float, default=0.8)
    p.add_argument("--out", default=None, help="write the surviving manifest lines here")

    p = sub.add_parser("stats", help="mask-area and category statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-pgm", default=None, help="bar chart of the area-ratio histogram")

    p = sub.add_parser("extract-hf", help="high-frequency detail map of a PGM image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius-frac", type=float, default=0.1)
    p.add_argument("--normalize", choices=["none", "minmax"], default="minmax")

    p = sub.add_parser("split-diptych", help="seam-split a two-panel PPM image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-left", required=True)
    p.add_argument("--out-right", required=True)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("train", help="train the toy model on a manifest")
    p.add_argument("--config", default=None, help="JSON run config (version required)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("infer", help="inpaint one sample from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--human", required=True)
    p.add_argument("--product", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--radius-frac", type=float, default=0.1)

    p = sub.add_parser("grad-check", help="finite-difference validation of the losses")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-3)

    sub.add_parser("selftest", help="bundled structural checks")
    return parser


def _atomic_json(path: str, payload: str) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)


_RUN_CONFIG_KEYS = {"version", "model", "train", "data"}


def load_run_config(path: str) -> dict:
    from .errors import ContractViolation

    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "version" not in doc:
        raise ContractViolation("run config must be an object with a 'version' field")
    unknown = set(doc) - _RUN_CONFIG_KEYS
    if unknown:
        raise ContractViolation(f"unknown run-config keys: {sorted(unknown)}")
    from dataclasses import fields

    from .model import ModelConfig
    from .trainer import TrainConfig

    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        allowed = {f.name for f in fields(cls)}
        extra = set(doc.get(section, {})) - allowed
        if extra:
            raise ContractViolation(f"unknown {section} config keys: {sorted(extra)}")
    return doc


def _cmd_gen_data(args) -> int:
    from .datagen import build_samples, write_dataset

    records = build_samples(
        args.count,
        args.seed,
        size=args.size,
        keep_failed=args.keep_failed,
        sem_threshold=args.sem_th,
        txt_threshold=args.txt_th,
        corrupt_prob=args.corrupt,
    )
    manifest = write_dataset(records, args.out)
    print(f"wrote {len(records)} samples to {manifest}")
    return 0


def _cmd_filter(args) -> int:
    from .datagen import apply_filters, load_manifest

    records = load_manifest(args.manifest)
    kept = apply_filters(records, args.sem_th, args.txt_th)
    print(f"{len(kept)}/{len(records)} samples pass at sem>={args.sem_th} txt>={args.txt_th}")
    if args.out:
        ids = {r.sample_id for r in kept}
        lines = []
        with open(args.manifest) as fh:
            for line in fh:
                if line.strip() and json.loads(line)["id"] in ids:
                    lines.append(line.rstrip("\n"))
        _atomic_json(args.out, "\n".join(lines) + "\n")
    return 0


def _cmd_stats(args) -> int:
    from dataclasses import asdict

    from . import pnm
    from .datagen import dataset_stats, load_manifest, render_histogram

    records = load_manifest(args.manifest)
    report = dataset_stats(records)
    payload = json.dumps(asdict(report), indent=2, sort_keys=True)
    print(payload)
    if args.out_json:
        _atomic_json(args.out_json, payload)
    if args.out_pgm:
        pnm.write_pgm(args.out_pgm, render_histogram(report.area_ratio_bins))
    return 0


def _cmd_extract_hf(args) -> int:
    from . import pnm
    from .spectral import HighPassConfig, extract_hf

    img = pnm.read_pgm(args.inp)
    cfg = HighPassConfig(radius_fraction=args.radius_frac, normalize=args.normalize)
    pnm.write_pgm(args.out, extract_hf(img, cfg))
    return 0


def _cmd_split(args) -> int:
    from . import pnm
    from .datagen import split_diptych

    result = split_diptych(pnm.read_ppm(args.inp), size=args.size)
    pnm.write_ppm(args.out_left, result.product)
    pnm.write_ppm(args.out_right, result.right_panel)
    print(f"seam at column {result.seam}")
    return 0


def _cmd_train(args) -> int:
    from .datagen import load_manifest
    from .model import ModelConfig
    from .trainer import TrainConfig, train

    doc = load_run_config(args.config) if args.config else {"version": 1}
    train_kwargs = dict(doc.get("train", {}))
    if "betas" in train_kwargs:
        train_kwargs["betas"] = tuple(train_kwargs["betas"])
    for key in ("steps", "seed", "lr"):
        val = getattr(args, key)
        if val is not None:
            train_kwargs[key] = val
    cfg = TrainConfig(**train_kwargs)
    model_cfg = ModelConfig(**doc.get("model", {}))
    records = load_manifest(args.data)
    os.makedirs(args.out, exist_ok=True)
    result = train(
        cfg,
        records,
        model_config=model_cfg,
        out_dir=args.out,
        log_path=os.path.join(args.out, "log.jsonl"),
    )
    last = result.log[-1]
    print(f"final step {last.step}: l_overall={last.l_overall:.5f} (skipped={result.optimizer.skipped})")
    return 0


def _cmd_infer(args) -> int:
    from . import pnm
    from .datagen import tokenize
    from .model import load_checkpoint
    from .trainer import sample

    state, extras = load_checkpoint(args.ckpt)
    human = pnm.read_ppm(args.human)
    product = pnm.read_ppm(args.product)
    mask = pnm.read_pgm(args.mask) > 0.5
    out = sample(
        state,
        tokenize(args.prompt, state.config.text_len),
        human,
        product,
        mask,
        steps=args.steps,
        seed=args.seed,
        radius_fraction=extras.get("radius_fraction", 0.1),
    )
    pnm.write_ppm(args.out, out)
    return 0


def _cmd_eval(args) -> int:
    from . import pnm
    from .datagen import load_manifest
    from .evalkit import evaluate_pairs
    from .embed import HistogramEmbedder
    from .spectral import HighPassConfig

    records = load_manifest(args.manifest)
    pairs = []
    for rec in records:
        pred_path = os.path.join(args.pred_dir, f"{rec.sample_id}.ppm")
        pairs.append((rec, pnm.read_ppm(pred_path)))
    cfg = HighPassConfig(radius_fraction=args.radius_frac, normalize="minmax")
    report = evaluate_pairs(pairs, hp_cfg=cfg, embedder=HistogramEmbedder())
    _atomic_json(args.report, report.to_json())
    print(f"ssim={report.mean_ssim:.4f} ssim_hf={report.mean_ssim_hf:.4f} n={len(report.rows)}")
    return 0


def _cmd_grad_check(args) -> int:
    import numpy as np

    from .model import ModelConfig, ModelState
    from .objective import TrainBatch, loss_overall
    from .spectral import HighPassConfig, extract_hf_op
    from .tensor import GradTape, Tensor, grad_check, grad_check_params
    from . import tensor as T

    cfg = HighPassConfig(radius_fraction=0.25, normalize="none")
    rng = np.random.default_rng(0)
    img = Tensor(rng.random((8, 8)).astype(np.float64), dtype=np.float64)
    err_hf = grad_check(lambda x: T.sum_(extract_hf_op(x, cfg)), [img], h=args.step)
    print(f"extract_hf grad rel err: {err_hf:.3e}")

    model_cfg = ModelConfig(image_size=16, text_len=8)
    state = ModelState.init(model_cfg, seed=0).astype(np.float64)
    batch = _toy_batch(model_cfg, rng)
    err_loss = grad_check_params(
        lambda: loss_overall(state, batch)[0], state.params, n_samples=args.samples, h=args.step
    )
    print(f"overall loss grad rel err: {err_loss:.3e}")
    ok = err_hf < 1e-4 and err_loss < 1e-3
    print("grad-check PASS" if ok else "grad-check FAIL")
    return 0 if ok else 1


def _toy_batch(model_cfg, rng):
    import numpy as np

    from .objective import TrainBatch

    b, s = 2, model_cfg.image_size
    mask = np.zeros((b, s, s), dtype=bool)
    mask[:, 4:12, 4:12] = True
    return TrainBatch(
        human=rng.random((b, s, s, 3)).astype(np.float32),
        product=rng.random((b, s, s, 3)).astype(np.float32),
        gt=rng.random((b, s, s, 3)).astype(np.float32),
        mask=mask,
        text_ids=np.zeros((b, model_cfg.text_len), dtype=np.int64),
        t=np.array([0.3, 0.7], dtype=np.float32),
        eps=rng.standard_normal((b, model_cfg.seg_tokens, model_cfg.dim)).astype(np.float32),
    )


def _cmd_selftest(args) -> int:
    import numpy as np

    from .model import ModelConfig, ModelState, downsample_mask
    from .objective import loss_overall
    from .spectral import dft2, idft2
    from .tensor import GradTape

    rng = np.random.default_rng(1)

    img = rng.random((16, 16))
    rt = idft2(dft2(img)).real
    assert np.max(np.abs(rt - img)) < 1e-6, "transform round trip failed"
    print("ok: transform round trip")

    cfg = ModelConfig(image_size=16, text_len=8)
    state = ModelState.init(cfg, seed=3)
    batch = _toy_batch(cfg, rng)
    base, _ = loss_overall(state, batch, use_dal=False)
    for i in range(cfg.n_dual):
        assert float(state.params[f"sea_alpha.{i}"].data) == 0.0
    state_off = ModelState.init(ModelConfig(image_size=16, text_len=8, use_sea=False), seed=3)
    off, _ = loss_overall(state_off, batch, use_dal=False)
    assert base.data == off.data, "gate-at-zero reduction failed"
    print("ok: zero-gate reduction matches the plain model")

    capture: dict = {}
    with GradTape() as tape:
        loss, _ = loss_overall(state, batch, capture=capture)
        tape.backward(loss)
    m_ds = np.stack([downsample_mask(m, cfg.patch) for m in batch.mask])
    gate = np.zeros((m_ds.shape[0], cfg.visual_tokens, 1))
    gate[:, 2 * cfg.seg_tokens :, 0] = m_ds.reshape(m_ds.shape[0], -1)
    for i, g in capture["mask_grads"].items():
        outside = np.broadcast_to(gate == 0.0, g.shape)
        assert np.all(g[outside] == 0.0), "mask leaked gradient"
    print("ok: masked-branch gradients vanish outside the mask")
    print("selftest PASS")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "filter": _cmd_filter,
    "stats": _cmd_stats,
    "extract-hf": _cmd_extract_hf,
    "split-diptych": _cmd_split,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "selftest": _cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; remap to 1, keep 0 for --help
        return 0 if exc.code == 0 else 1
    from .errors import ContractViolation, NumericFault

    try:
        return _HANDLERS[args.command](args)
    except (ContractViolation, NumericFault) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

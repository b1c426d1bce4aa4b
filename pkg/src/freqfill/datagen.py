"""Procedural two-panel dataset: synthesis, seam splitting, filtering stages,
masking, captions, and statistics.

The generator drops in for a text-to-image synthesis stage: the left panel
shows a patterned product with glyph-like label strokes on a plain light
background, the right panel shows the same product composited into a darker
scene with a person proxy. Everything downstream (seam detection, similarity
and text filtering, masking) operates as it would on real renders.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pnm
from .embed import Embedder, HistogramEmbedder, cosine01
from .errors import ContractViolation
from .spectral import luma, sobel_seam

Array = np.ndarray

DIPTYCH_H = 48
DIPTYCH_W = 96
PANEL = DIPTYCH_W // 2
MASK_FILL = 0.5

COLORS = [
    "red", "orange", "amber", "yellow", "lime", "green",
    "teal", "cyan", "blue", "violet", "magenta", "pink",
]
PATTERNS = ["stripes", "checker", "dots", "rings", "speckle"]
CATEGORIES = ["bottle", "jar", "box", "tube", "can", "pouch"]

VOCAB = ["<pad>", "<unk>", "a", "next", "to", "person"] + COLORS + PATTERNS + CATEGORIES
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str, length: int = 16) -> Array:
    ids = [_WORD_TO_ID.get(w, 1) for w in text.lower().split()][:length]
    ids += [0] * (length - len(ids))
    return np.asarray(ids, dtype=np.int64)


def _hsv_to_rgb(h: float, s: float, v: float) -> Array:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.asarray(rgb, dtype=np.float32)


_GLYPH_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"
_GLYPHS: dict[str, Array] = {}
for _c in _GLYPH_CHARS:
    _g = np.random.default_rng(ord(_c) * 7919).random((5, 3)) > 0.45
    _g[2, 1] = True  # keep every glyph non-empty
    _GLYPHS[_c] = _g


def _draw_label(img: Array, y: int, x: int, text: str, color: Array) -> None:
    """Stamp 3x5 pseudo-glyph strokes; clipped at the image border."""
    h, w, _ = img.shape
    cx = x
    for ch in text.lower():
        g = _GLYPHS.get(ch)
        if g is None:
            cx += 2
            continue
        for gy in range(5):
            for gx in range(3):
                if g[gy, gx] and 0 <= y + gy < h and 0 <= cx + gx < w:
                    img[y + gy, cx + gx] = color
        cx += 4


def _pattern_mask(kind: str, h: int, w: int, rng: np.random.Generator) -> Array:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        return (yy // max(2, h // 8)) % 2 == 0
    if kind == "checker":
        c = max(2, min(h, w) // 6)
        return ((yy // c) + (xx // c)) % 2 == 0
    if kind == "dots":
        c = max(3, min(h, w) // 5)
        return ((yy % c) - c // 2) ** 2 + ((xx % c) - c // 2) ** 2 <= max(1, c // 3) ** 2
    if kind == "rings":
        r = np.hypot(yy - h / 2, xx - w / 2)
        return (r // max(2, min(h, w) // 8)) % 2 == 0
    # speckle
    return rng.random((h, w)) > 0.55


def _silhouette(category: str, h: int, w: int) -> Array:
    m = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    if category == "bottle":
        neck_h = max(1, int(0.22 * h))
        neck_w = max(1, int(0.34 * w))
        x0 = (w - neck_w) // 2
        m[:neck_h, x0 : x0 + neck_w] = True
        m[neck_h:, :] = True
    elif category == "jar":
        lid_h = max(1, int(0.15 * h))
        lid_w = max(1, int(0.8 * w))
        x0 = (w - lid_w) // 2
        m[:lid_h, x0 : x0 + lid_w] = True
        m[lid_h:, :] = True
    elif category == "tube":
        body_w = max(1, int(0.6 * w))
        x0 = (w - body_w) // 2
        m[:, x0 : x0 + body_w] = True
    elif category == "pouch":
        for y in range(h):
            frac = 0.6 + 0.4 * (y / max(1, h - 1))
            bw = max(1, int(frac * w))
            x0 = (w - bw) // 2
            m[y, x0 : x0 + bw] = True
    elif category == "can":
        m[:, :] = True
    else:  # box
        m[:, :] = True
    return m


def _render_product(
    img: Array, y0: int, x0: int, bh: int, bw: int, spec: dict, rng: np.random.Generator
) -> None:
    sil = _silhouette(spec["category"], bh, bw)
    c1 = spec["c1"]
    c2 = spec["c2"]
    region = img[y0 : y0 + bh, x0 : x0 + bw]
    pat = _pattern_mask(spec["pattern"], bh, bw, rng)
    region[sil] = c1
    region[sil & pat] = c1 * 0.55 + c2 * 0.45
    # darker outline so edges read at any scale
    edge = sil & ~(
        np.roll(sil, 1, 0) & np.roll(sil, -1, 0) & np.roll(sil, 1, 1) & np.roll(sil, -1, 1)
    )
    region[edge] = c1 * 0.35
    if bh >= 12 and bw >= 10:
        ly = y0 + int(0.55 * bh)
        lx = x0 + max(1, int(0.12 * bw))
        _draw_label(img, ly, lx, spec["label"], np.asarray([0.08, 0.08, 0.1], np.float32))


@dataclass
class DiptychResult:
    image: Array  # (48, 96, 3)
    seam: int
    meta: dict


def gen_diptych(seed: int) -> DiptychResult:
    """Deterministic two-panel render; the seam sits exactly at W/2."""
    rng = np.random.default_rng([7_777_777, seed])
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    hue_bin = int(rng.integers(len(COLORS)))
    hue = (hue_bin + float(rng.random()) * 0.8) / len(COLORS)
    c1 = _hsv_to_rgb(hue, 0.55 + 0.4 * float(rng.random()), 0.5 + 0.45 * float(rng.random()))
    c2 = _hsv_to_rgb((hue + 0.45) % 1.0, 0.6, 0.85)
    brand = "".join(
        _GLYPH_CHARS[int(rng.integers(26))] for _ in range(int(rng.integers(4, 7)))
    )
    volume = f"{int(rng.integers(1, 99)) * 10}ml"
    label = f"{brand} {volume}"
    spec = {"category": category, "pattern": pattern, "c1": c1, "c2": c2, "label": label}

    img = np.zeros((DIPTYCH_H, DIPTYCH_W, 3), dtype=np.float32)
    # left: product on a plain light background
    img[:, :PANEL] = 0.88 + 0.08 * float(rng.random())
    lw = int(PANEL * (0.52 + 0.22 * float(rng.random())))
    lh = int(DIPTYCH_H * (0.6 + 0.25 * float(rng.random())))
    ly0 = (DIPTYCH_H - lh) // 2
    lx0 = (PANEL - lw) // 2
    _render_product(img, ly0, lx0, lh, lw, spec, np.random.default_rng([3, seed]))

    # right: darker scene, person proxy, same product at a sampled box
    top = _hsv_to_rgb(float(rng.random()), 0.35, 0.3 + 0.25 * float(rng.random()))
    bot = _hsv_to_rgb(float(rng.random()), 0.3, 0.35 + 0.3 * float(rng.random()))
    ramp = np.linspace(0.0, 1.0, DIPTYCH_H, dtype=np.float32)[:, None]
    img[:, PANEL:] = (top[None, None] * (1 - ramp[:, :, None]) + bot[None, None] * ramp[:, :, None])
    floor_y = int(0.8 * DIPTYCH_H)
    img[floor_y:, PANEL:] *= 0.75

    skin = np.asarray([0.85, 0.66, 0.5], np.float32)
    shirt = _hsv_to_rgb(float(rng.random()), 0.5, 0.55)
    person_x = PANEL + (4 if rng.random() < 0.5 else PANEL - 16)
    head_r = 4
    yy, xx = np.mgrid[0:DIPTYCH_H, 0:DIPTYCH_W]
    head = (yy - 12) ** 2 + (xx - (person_x + 6)) ** 2 <= head_r**2
    img[head] = skin
    img[17 : floor_y + 4, person_x + 2 : person_x + 11] = shirt

    ratio = float(np.exp(rng.uniform(np.log(0.055), np.log(0.58))))
    aspect = float(rng.uniform(0.7, 1.5))
    area = ratio * PANEL * DIPTYCH_H
    bh = int(np.clip(np.sqrt(area * aspect), 6, DIPTYCH_H - 2))
    bw = int(np.clip(area / bh, 6, PANEL - 2))
    by0 = int(rng.integers(1, DIPTYCH_H - bh))
    bx0 = int(rng.integers(1, PANEL - bw))
    _render_product(img, by0, PANEL + bx0, bh, bw, spec, np.random.default_rng([5, seed]))

    meta = {
        "category": category,
        "pattern": pattern,
        "color": COLORS[hue_bin],
        "hue_bin": hue_bin,
        "label_left": label,
        "label_right": label,
        "bbox": [by0, bx0, by0 + bh, bx0 + bw],  # right-panel coords
        "seam": PANEL,
        "caption": f"a {COLORS[hue_bin]} {pattern} {category} next to a person",
    }
    return DiptychResult(image=np.clip(img, 0.0, 1.0), seam=PANEL, meta=meta)


# ---------------------------------------------------------------------------
# Splitting and resizing


def _box_weights(n_in: int, n_out: int) -> Array:
    """Fractional box-filter weights (n_out, n_in) for area resampling."""
    w = np.zeros((n_out, n_in))
    f = n_in / n_out
    for i in range(n_out):
        lo, hi = i * f, (i + 1) * f
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            w[i, j] = (min(j + 1, hi) - max(j, lo)) / f
    return w


def resize_area(img: Array, out_h: int, out_w: int) -> Array:
    arr = np.asarray(img, dtype=np.float64)
    wy = _box_weights(arr.shape[0], out_h)
    wx = _box_weights(arr.shape[1], out_w)
    if arr.ndim == 2:
        return (wy @ arr @ wx.T).astype(np.float32)
    out = np.stack([wy @ arr[:, :, c] @ wx.T for c in range(arr.shape[2])], axis=2)
    return out.astype(np.float32)


def pad_to_square(img: Array) -> tuple[Array, int, int]:
    """Replicate-pad the short side symmetrically; returns (image, pad_top, pad_left)."""
    h, w = img.shape[:2]
    side = max(h, w)
    pad_top = (side - h) // 2
    pad_left = (side - w) // 2
    pads = [(pad_top, side - h - pad_top), (pad_left, side - w - pad_left)]
    if img.ndim == 3:
        pads.append((0, 0))
    return np.pad(img, pads, mode="edge"), pad_top, pad_left


@dataclass
class PanelTransform:
    pad_top: int
    pad_left: int
    scale_y: float
    scale_x: float

    def map_box(self, box: tuple[int, int, int, int], out_side: int) -> tuple[int, int, int, int]:
        y0, x0, y1, x1 = box
        ny0 = int(np.floor((y0 + self.pad_top) * self.scale_y + 0.5))
        nx0 = int(np.floor((x0 + self.pad_left) * self.scale_x + 0.5))
        ny1 = int(np.floor((y1 + self.pad_top) * self.scale_y + 0.5))
        nx1 = int(np.floor((x1 + self.pad_left) * self.scale_x + 0.5))
        ny0, nx0 = max(0, ny0), max(0, nx0)
        ny1, nx1 = min(out_side, max(ny1, ny0 + 1)), min(out_side, max(nx1, nx0 + 1))
        return ny0, nx0, ny1, nx1


@dataclass
class SplitResult:
    product: Array
    right_panel: Array
    seam: int
    left_tf: PanelTransform
    right_tf: PanelTransform


def split_diptych(diptych: Array, size: int = 32, band: tuple[float, float] = (0.4, 0.6)) -> SplitResult:
    """Cut at the detected vertical seam, then pad-to-square and resize each panel."""
    seam = sobel_seam(luma(diptych), band)
    panels = []
    tfs = []
    for part in (diptych[:, :seam], diptych[:, seam:]):
        sq, pt, pl = pad_to_square(part)
        panels.append(resize_area(sq, size, size))
        tfs.append(PanelTransform(pt, pl, size / sq.shape[0], size / sq.shape[1]))
    return SplitResult(
        product=panels[0], right_panel=panels[1], seam=seam, left_tf=tfs[0], right_tf=tfs[1]
    )


# ---------------------------------------------------------------------------
# Filtering


@dataclass
class FilterVerdict:
    semantic_score: float
    textual_overlap: float
    passed: bool
    sem_threshold: float
    txt_threshold: float


def semantic_filter(
    product: Array,
    right_panel: Array,
    embedder: Embedder,
    threshold: float,
    bbox: tuple[int, int, int, int],
) -> tuple[float, bool]:
    """Similarity of the product crop against the reference, in [0, 1]."""
    y0, x0, y1, x1 = bbox
    crop = np.asarray(right_panel)[y0:y1, x0:x1]
    if crop.size == 0:
        raise ContractViolation("empty product crop")
    score, degenerate = cosine01(embedder.embed(product), embedder.embed(crop))
    if degenerate:
        return 0.0, False
    return score, score >= threshold


def text_overlap(s1: str, s2: str) -> float:
    """Case-folded whitespace-token Jaccard similarity; two empties count as 1."""
    a = set(s1.lower().split())
    b = set(s2.lower().split())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def corrupt_text(s: str, rng: np.random.Generator, prob: float) -> str:
    if prob <= 0:
        return s
    out = []
    for ch in s:
        if ch.isalnum() and rng.random() < prob:
            out.append(_GLYPH_CHARS[int(rng.integers(len(_GLYPH_CHARS)))])
        else:
            out.append(ch)
    return "".join(out)


# ---------------------------------------------------------------------------
# Sample assembly


@dataclass
class SampleRecord:
    sample_id: str
    caption: str
    tokens: Array
    human: Array  # (S, S, 3) float32, mid-gray inside the mask
    product: Array
    gt: Array
    mask: Array  # (S, S) bool, the product bounding box
    meta: dict
    verdict: FilterVerdict | None = None
    paths: dict = field(default_factory=dict)

    @property
    def mask_area_ratio(self) -> float:
        return float(self.mask.mean())


def finalize_sample(
    right_panel: Array, meta: dict, bbox: tuple[int, int, int, int], sample_id: str, product: Array
) -> SampleRecord:
    """Mask the detected product box and template the caption."""
    side = right_panel.shape[0]
    y0, x0, y1, x1 = bbox
    if not (0 <= y0 < y1 <= side and 0 <= x0 < x1 <= side):
        raise ContractViolation(f"bbox {bbox} outside a {side}x{side} panel")
    mask = np.zeros((side, side), dtype=bool)
    mask[y0:y1, x0:x1] = True
    gt = np.asarray(right_panel, dtype=np.float32)
    human = gt.copy()
    human[mask] = MASK_FILL
    caption = meta["caption"]
    return SampleRecord(
        sample_id=sample_id,
        caption=caption,
        tokens=tokenize(caption),
        human=human,
        product=np.asarray(product, dtype=np.float32),
        gt=gt,
        mask=mask,
        meta=dict(meta, final_bbox=[y0, x0, y1, x1]),
    )


def make_sample(
    seed: int,
    size: int = 32,
    embedder: Embedder | None = None,
    sem_threshold: float = 0.85,
    txt_threshold: float = 0.8,
    corrupt_prob: float = 0.0,
) -> SampleRecord:
    """Full pipeline for one seed: synthesize, split, filter, mask."""
    embedder = embedder or HistogramEmbedder()
    dip = gen_diptych(seed)
    split = split_diptych(dip.image, size=size)
    # panel coordinates shift if the detected seam is off the true one
    off = dip.seam - split.seam
    by0, bx0, by1, bx1 = dip.meta["bbox"]
    bbox = split.right_tf.map_box((by0, bx0 + off, by1, bx1 + off), size)

    sem_score, sem_ok = semantic_filter(
        split.product, split.right_panel, embedder, sem_threshold, bbox
    )
    label_right = corrupt_text(
        dip.meta["label_right"], np.random.default_rng([11, seed]), corrupt_prob
    )
    txt_score = text_overlap(dip.meta["label_left"], label_right)
    verdict = FilterVerdict(
        semantic_score=sem_score,
        textual_overlap=txt_score,
        passed=bool(sem_ok and txt_score >= txt_threshold),
        sem_threshold=sem_threshold,
        txt_threshold=txt_threshold,
    )
    meta = dict(dip.meta, label_right=label_right, seam_detected=split.seam, seed=seed)
    rec = finalize_sample(split.right_panel, meta, bbox, f"s{seed:06d}", split.product)
    rec.verdict = verdict
    return rec


def build_samples(
    count: int,
    base_seed: int,
    size: int = 32,
    keep_failed: bool = False,
    sem_threshold: float = 0.85,
    txt_threshold: float = 0.8,
    corrupt_prob: float = 0.0,
    max_attempts_factor: int = 8,
) -> list[SampleRecord]:
    """Deterministic sample stream; failing records are skipped unless kept."""
    records: list[SampleRecord] = []
    attempt = 0
    limit = count * max_attempts_factor
    while len(records) < count and attempt < limit:
        rec = make_sample(
            base_seed * 1_000_003 + attempt,
            size=size,
            sem_threshold=sem_threshold,
            txt_threshold=txt_threshold,
            corrupt_prob=corrupt_prob,
        )
        attempt += 1
        if keep_failed or rec.verdict.passed:
            records.append(rec)
    if len(records) < count:
        raise ContractViolation(
            f"generator produced only {len(records)}/{count} passing samples"
        )
    return records


# ---------------------------------------------------------------------------
# Manifest I/O


def write_dataset(records: list[SampleRecord], out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for rec in records:
        sid = rec.sample_id
        paths = {
            "human": f"{sid}_human.ppm",
            "product": f"{sid}_product.ppm",
            "gt": f"{sid}_gt.ppm",
            "mask": f"{sid}_mask.pgm",
        }
        pnm.write_ppm(os.path.join(out_dir, paths["human"]), rec.human)
        pnm.write_ppm(os.path.join(out_dir, paths["product"]), rec.product)
        pnm.write_ppm(os.path.join(out_dir, paths["gt"]), rec.gt)
        pnm.write_pgm(os.path.join(out_dir, paths["mask"]), rec.mask.astype(np.float32))
        rec.paths = paths
        entry = {
            "id": sid,
            "prompt": rec.caption,
            "tokens": rec.tokens.tolist(),
            "files": paths,
            "mask_area_ratio": rec.mask_area_ratio,
            "meta": _json_safe(rec.meta),
            "filter": asdict(rec.verdict) if rec.verdict else None,
        }
        lines.append(json.dumps(entry, sort_keys=True))
    manifest = os.path.join(out_dir, "manifest.jsonl")
    tmp = manifest + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest)
    return manifest


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_manifest(path: str) -> list[SampleRecord]:
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            files = entry["files"]
            mask = pnm.read_pgm(os.path.join(base, files["mask"])) > 0.5
            verdict = FilterVerdict(**entry["filter"]) if entry.get("filter") else None
            records.append(
                SampleRecord(
                    sample_id=entry["id"],
                    caption=entry["prompt"],
                    tokens=np.asarray(entry["tokens"], dtype=np.int64),
                    human=pnm.read_ppm(os.path.join(base, files["human"])),
                    product=pnm.read_ppm(os.path.join(base, files["product"])),
                    gt=pnm.read_ppm(os.path.join(base, files["gt"])),
                    mask=mask,
                    meta=entry.get("meta", {}),
                    verdict=verdict,
                    paths=files,
                )
            )
    if not records:
        raise ContractViolation(f"manifest {path} is empty")
    return records


def apply_filters(
    records: list[SampleRecord], sem_threshold: float, txt_threshold: float
) -> list[SampleRecord]:
    """Re-threshold existing scores; never rescans images."""
    kept = []
    for rec in records:
        if rec.verdict is None:
            continue
        if rec.verdict.semantic_score >= sem_threshold and rec.verdict.textual_overlap >= txt_threshold:
            kept.append(rec)
    return kept


# ---------------------------------------------------------------------------
# Statistics


@dataclass
class StatsReport:
    count: int
    area_ratio_bins: list[int]  # 10 uniform bins over (0, 1]
    categories: dict


def dataset_stats(records: list[SampleRecord]) -> StatsReport:
    if not records:
        raise ContractViolation("stats need a non-empty record list")
    bins = [0] * 10
    cats: dict[str, int] = {}
    for rec in records:
        ratio = rec.mask_area_ratio
        bins[min(int(ratio * 10), 9)] += 1
        cat = rec.meta.get("category", "unknown")
        cats[cat] = cats.get(cat, 0) + 1
    return StatsReport(count=len(records), area_ratio_bins=bins, categories=dict(sorted(cats.items())))


def render_histogram(bins: list[int], height: int = 64, bar_width: int = 10) -> Array:
    """Simple bar chart as a grayscale image (dark bars on a light field)."""
    peak = max(max(bins), 1)
    w = bar_width * len(bins) + 2
    img = np.full((height, w), 0.95, dtype=np.float32)
    for i, v in enumerate(bins):
        bar_h = int(round((height - 4) * v / peak))
        if bar_h:
            x0 = 1 + i * bar_width
            img[height - 2 - bar_h : height - 2, x0 : x0 + bar_width - 2] = 0.15
    return img

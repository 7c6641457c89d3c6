"""RMSE / SSIM metrics, split evaluation reports and ablation sweeps.

Metrics work on images remapped from the [-1, 1] storage range to [0, 1].
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch

from .data import DatasetManifest, reference_chars

logger = logging.getLogger(__name__)

PIXEL_DOMAIN = "metrics computed on pixels remapped from [-1,1] to [0,1] (white = 1)"
AXES = ("codebook_size", "modules", "ref_count")
MODULE_VALUES = ("full", "no-LSA", "no-GSA")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def to_unit(img) -> np.ndarray:
    """GlyphImage / array in [-1, 1] -> float64 array in [0, 1]."""
    arr = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    return (arr + 1.0) / 2.0


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(a, b) -> float:
    """Root-mean-square difference of two glyphs (inputs in [-1, 1])."""
    x, y = to_unit(a), to_unit(b)
    _check(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter keeping only fully covered positions."""
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all 11x11 Gaussian (sigma 1.5) windows that fit inside the image."""
    x, y = to_unit(a), to_unit(b)
    _check(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(y * y, g) - my * my
    cxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


class PerceptualMetric(Protocol):
    """Adapter interface for optional metrics backed by pretrained networks (LPIPS, FID)."""

    name: str

    def __call__(self, generated: np.ndarray, target: np.ndarray) -> float: ...


@dataclass
class MetricReport:
    split: str
    records: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    skipped: int = 0

    def finalize(self) -> "MetricReport":
        keys = [k for k in ("rmse", "ssim", "lpips") if self.records and k in self.records[0]]
        self.aggregates = {f"mean_{k}": float(np.mean([r[k] for r in self.records])) for k in keys}
        self.aggregates["count"] = len(self.records)
        self.aggregates["skipped"] = self.skipped
        return self

    def to_dict(self) -> dict:
        return {"header": PIXEL_DOMAIN, "split": self.split, "records": self.records,
                "aggregates": self.aggregates, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        """Write the JSON report and a per-record CSV (plot data) next to it."""
        path = Path(path)
        path.write_text(self.to_json())
        if self.records:
            cols = [k for k in self.records[0] if k != "refs"]
            with open(path.with_suffix(".csv"), "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
                w.writeheader()
                w.writerows(self.records)


def _as_batch(pixels_list, device, dtype):
    return torch.as_tensor(np.stack(pixels_list), dtype=dtype, device=device)[:, None]


def evaluate_split(model, manifest: DatasetManifest, split: str, k: int = 3, seed: int = 0,
                   ref_mode: str = "fixed", extra_metrics: list[PerceptualMetric] = (),
                   config: dict | None = None, batch: int = 32) -> MetricReport:
    """Generate every (font, char) of ``split`` and score it against the ground truth.

    ``model`` is a :class:`Generator` or a generator checkpoint path. The
    content glyph comes from the template font; references are drawn per font
    by ``reference_chars`` with ``seed``.
    """
    if isinstance(model, (str, Path)):
        from .trainer import load_generator

        model, _, cfg, _ = load_generator(model)
        config = config or cfg.to_dict()
    gen = model
    gen.eval()
    dev, dtype = gen.codes.device, gen.codes.dtype
    report = MetricReport(split=split, config={**(config or {}), "eval_split": split, "eval_k": k,
                                               "eval_seed": seed, "ref_mode": ref_mode})
    rng = np.random.default_rng(seed)
    jobs = []
    for font, char in manifest.split_pairs(split):
        if not manifest.has(font, char) or not manifest.has(manifest.content_font_id, char):
            report.skipped += 1
            continue
        refs = reference_chars(manifest, font, char, k, seed, ref_mode, rng)
        jobs.append((font, char, refs))
    with torch.no_grad():
        for i in range(0, len(jobs), batch):
            chunk = jobs[i:i + batch]
            content = _as_batch([manifest.load_pixels(manifest.content_font_id, c) for _, c, _ in chunk], dev, dtype)
            refs = torch.stack([_as_batch([manifest.load_pixels(f, r) for r in rs], dev, dtype)
                                for f, _, rs in chunk])
            out, _ = gen(content, refs)
            out = out.clamp(-1, 1).cpu().numpy()[:, 0]
            for (font, char, rs), pred in zip(chunk, out):
                truth = manifest.load_pixels(font, char)
                rec = {"font_id": font, "char_id": int(char), "refs": [int(r) for r in rs],
                       "rmse": rmse(pred, truth), "ssim": ssim(pred, truth)}
                for metric in extra_metrics:
                    rec[metric.name] = float(metric(pred, truth))
                report.records.append(rec)
    return report.finalize()


def validate_axis(axis: str, values) -> list:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    values = list(values)
    if not values:
        raise ValueError("ablation needs at least one value")
    if axis == "modules":
        bad = [v for v in values if v not in MODULE_VALUES]
        if bad:
            raise ValueError(f"invalid module variant(s) {bad}; choose from {MODULE_VALUES}")
    else:
        bad = [v for v in values if not isinstance(v, (int, np.integer)) or isinstance(v, bool)
               or v < (2 if axis == "codebook_size" else 1)]
        if bad:
            raise ValueError(f"invalid {axis} value(s) {bad}")
    return values


def ablation_sweep(axis: str, values, base_config, manifest: DatasetManifest, split: str = "UFUC",
                   out_dir=None, vq_model=None, trained=None,
                   progress: Callable | None = None) -> list[dict]:
    """One training + evaluation per value (ref_count: one model, K varied at inference).

    ``vq_model`` reuses a pretrained codebook for the ``modules`` / ``ref_count``
    axes. ``trained`` reuses a generator for ``ref_count``, or maps module
    variants to already-trained generators for ``modules``.
    """
    from .codebook import pretrain_codebook
    from .trainer import train

    values = validate_axis(axis, values)
    cfg0 = base_config
    rows = []

    def run_eval(gen, cfg, k, label):
        rep = evaluate_split(gen, manifest, split, k=k, seed=cfg.seed, ref_mode=cfg.ref_mode,
                             config=cfg.to_dict())
        row = {"axis": axis, "value": label, "split": split,
               "ssim": rep.aggregates["mean_ssim"], "rmse": rep.aggregates["mean_rmse"],
               "count": rep.aggregates["count"]}
        rows.append(row)
        if progress:
            progress(row)
        return rep

    if axis == "ref_count":
        if trained is None:
            vq = vq_model or pretrain_codebook(manifest, cfg0).model
            trained = train(manifest, vq, cfg0).generator
        for k in values:
            run_eval(trained, cfg0, k, k)
    else:
        for v in values:
            if axis == "codebook_size":
                cfg = cfg0.replace(codebook_size=v)
                vq = pretrain_codebook(manifest, cfg).model
            else:
                cfg = cfg0.replace(variant=v)
                if isinstance(trained, dict) and v in trained:
                    run_eval(trained[v], cfg, cfg.k_refs, v)
                    continue
                vq = vq_model or pretrain_codebook(manifest, cfg).model
            gen = train(manifest, vq, cfg).generator
            run_eval(gen, cfg, cfg.k_refs, v)

    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"ablation_{axis}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        (out / f"ablation_{axis}.json").write_text(json.dumps(rows, indent=1))
    return rows

"""Glyph rendering, dataset manifests and training-triplet sampling.

Images are stored as grayscale PNGs under ``<root>/<font_id>/<hex>.png`` and
handled in memory as float arrays in [-1, 1] with +1 = white background and
-1 = ink.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

logger = logging.getLogger(__name__)

SPLITS = ("SFSC", "UFSC", "UFUC")
HOLDOUT_SPLIT = "SFSC_holdout"
RENDER_INFO = "render_info.json"
_SUPERSAMPLE = 4


class FontError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class GlyphImage:
    pixels: np.ndarray
    font_id: str
    char_id: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"glyph pixels must be a square 2-D grid, got {self.pixels.shape}")
        np.clip(self.pixels, -1.0, 1.0, out=self.pixels)

    @property
    def canvas(self) -> int:
        return self.pixels.shape[0]

    @property
    def char(self) -> str:
        return chr(self.char_id)

    @classmethod
    def from_png(cls, path: str | Path, font_id: str = "", char_id: int = 0) -> "GlyphImage":
        arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
        return cls(arr / 127.5 - 1.0, font_id, char_id)

    def to_pil(self) -> Image.Image:
        arr = np.rint((self.pixels + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
        return Image.fromarray(arr, mode="L")

    def save(self, path: str | Path) -> None:
        self.to_pil().save(path)


def font_id_for(font_file: str | Path) -> str:
    return Path(font_file).stem


def glyph_filename(char_id: int) -> str:
    return f"{char_id:04x}.png"


def _load_font(font_file: Path, size: int):
    from fontTools.ttLib import TTFont

    try:
        cmap = TTFont(str(font_file), lazy=True).getBestCmap() or {}
        pil_font = ImageFont.truetype(str(font_file), size)
    except Exception as exc:  # fontTools and PIL raise a zoo of types
        raise FontError(f"cannot parse font file {font_file}: {exc}") from exc
    return cmap, pil_font


def _place(ink: np.ndarray, canvas: int, margin: float) -> np.ndarray:
    """Crop the ink bounding box, scale it into the margin box, center it."""
    rows = np.flatnonzero(ink.max(axis=1) > 0)
    cols = np.flatnonzero(ink.max(axis=0) > 0)
    crop = ink[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    box = canvas * (1.0 - 2.0 * margin)
    h, w = crop.shape
    scale = box / max(h, w)
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    resized = Image.fromarray(crop).resize((nw, nh), Image.Resampling.LANCZOS)
    out = Image.new("L", (canvas, canvas), 0)
    out.paste(resized, ((canvas - nw) // 2, (canvas - nh) // 2))
    return np.asarray(out, dtype=np.float32)


def render_font(font_file: str | Path, char_set: Iterable[int | str], canvas: int = 128,
                margin: float = 0.08) -> list[GlyphImage]:
    """Render ``char_set`` from one font file, skipping characters without an outline."""
    font_file = Path(font_file)
    if not font_file.exists():
        raise FontError(f"font file not found: {font_file}")
    size = canvas * _SUPERSAMPLE
    cmap, pil_font = _load_font(font_file, size)
    fid = font_id_for(font_file)
    out = []
    for ch in char_set:
        cp = ord(ch) if isinstance(ch, str) else int(ch)
        if cp not in cmap:
            logger.warning("%s: no glyph for U+%04X, skipped", font_file, cp)
            continue
        scratch = Image.new("L", (size * 3, size * 3), 0)
        ImageDraw.Draw(scratch).text((size, size), chr(cp), fill=255, font=pil_font)
        ink = np.asarray(scratch)
        if not ink.any():
            logger.warning("%s: glyph U+%04X has no outline, skipped", font_file, cp)
            continue
        coverage = _place(ink, canvas, margin) / 255.0
        out.append(GlyphImage(1.0 - 2.0 * coverage, fid, cp))
    return out


def render_dataset(font_files: Sequence[str | Path], chars: Iterable[int | str], root: str | Path,
                   canvas: int = 128, margin: float = 0.08, content_font: str | None = None,
                   workers: int = 1) -> Path:
    """Render every font into ``root`` and record what was rendered."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    char_ids = [ord(c) if isinstance(c, str) else int(c) for c in chars]

    def one(ff):
        glyphs = render_font(ff, char_ids, canvas, margin)
        d = root / font_id_for(ff)
        d.mkdir(exist_ok=True)
        for g in glyphs:
            g.save(d / glyph_filename(g.char_id))
        return font_id_for(ff), str(Path(ff).resolve()), [g.char_id for g in glyphs]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, font_files))
    fonts = {fid: path for fid, path, _ in results}
    if len(fonts) != len(results):
        raise DatasetError("font ids (file stems) must be unique")
    info = {
        "canvas": canvas,
        "margin": margin,
        "fonts": fonts,
        "chars": {fid: ids for fid, _, ids in results},
        "content_font_id": content_font or results[0][0],
    }
    (root / RENDER_INFO).write_text(json.dumps(info, indent=1, sort_keys=True))
    return root


@dataclass
class DatasetManifest:
    entries: list[dict]
    splits: dict[str, dict[str, list]]
    content_font_id: str
    seed: int
    canvas: int
    root: str = "."
    fonts: dict[str, str] = field(default_factory=dict)
    holdout: list[list] = field(default_factory=list)

    def __post_init__(self):
        self._index = {(e["font_id"], int(e["char_id"])): e["path"] for e in self.entries}
        self._cache: dict[tuple[str, int], np.ndarray] = {}
        self._holdout = {(f, int(c)) for f, c in self.holdout}

    # persistence
    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "splits": self.splits,
            "content_font_id": self.content_font_id,
            "seed": self.seed,
            "canvas": self.canvas,
            "root": self.root,
            "fonts": self.fonts,
            "holdout": self.holdout,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        root = Path(data.get("root", "."))
        if not root.is_absolute():
            data["root"] = str((path.parent / root).resolve())
        return cls(**data)

    # queries
    def has(self, font_id: str, char_id: int) -> bool:
        return (font_id, int(char_id)) in self._index

    def is_holdout(self, font_id: str, char_id: int) -> bool:
        return (font_id, int(char_id)) in self._holdout

    def chars_of(self, font_id: str) -> list[int]:
        return sorted(c for f, c in self._index if f == font_id)

    def split_fonts(self, split: str) -> list[str]:
        return list(self._split(split)["fonts"])

    def split_chars(self, split: str) -> list[int]:
        return [int(c) for c in self._split(split)["chars"]]

    def _split(self, split: str) -> dict:
        if split == HOLDOUT_SPLIT:
            return self.splits["SFSC"]
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]

    def split_pairs(self, split: str) -> list[tuple[str, int]]:
        """(font, char) pairs belonging to a split, holdout pairs routed to their own split."""
        if split == HOLDOUT_SPLIT:
            return sorted((f, int(c)) for f, c in self.holdout)
        pairs = [(f, c) for f in self.split_fonts(split) for c in self.split_chars(split)]
        if split == "SFSC":
            pairs = [p for p in pairs if p not in self._holdout]
        return pairs

    def image_path(self, font_id: str, char_id: int) -> Path:
        try:
            rel = self._index[(font_id, int(char_id))]
        except KeyError:
            raise DatasetError(f"no image for font {font_id!r}, char U+{int(char_id):04X}") from None
        return Path(self.root) / rel

    def load_pixels(self, font_id: str, char_id: int) -> np.ndarray:
        key = (font_id, int(char_id))
        if key not in self._cache:
            self._cache[key] = GlyphImage.from_png(self.image_path(*key)).pixels
        return self._cache[key]

    def glyph(self, font_id: str, char_id: int) -> GlyphImage:
        return GlyphImage(self.load_pixels(font_id, char_id).copy(), font_id, int(char_id))

    def content(self, char_id: int) -> GlyphImage:
        return self.glyph(self.content_font_id, char_id)


def build_manifest(rendered_root: str | Path, n_seen_fonts: int, n_seen_chars: int,
                   seed: int = 0, content_font_id: str | None = None,
                   n_holdout: int = 0) -> DatasetManifest:
    """Assign fonts and characters to the SFSC / UFSC / UFUC splits.

    The content template font is excluded from the style fonts and must cover
    every character used. Only characters every style font can render are
    kept. Assignment is a seeded permutation, so the manifest is reproducible
    from ``seed``.
    """
    root = Path(rendered_root)
    info_path = root / RENDER_INFO
    if info_path.exists():
        info = json.loads(info_path.read_text())
    else:
        info = {"fonts": {}, "chars": {}, "canvas": None}
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            info["chars"][d.name] = sorted(int(p.stem, 16) for p in d.glob("*.png"))
            info["fonts"][d.name] = ""
    char_map = {f: set(map(int, cs)) for f, cs in info["chars"].items()}
    if not char_map:
        raise DatasetError(f"no rendered fonts under {root}")
    content = content_font_id or info.get("content_font_id") or sorted(char_map)[0]
    if content not in char_map:
        raise DatasetError(f"content font {content!r} was not rendered under {root}")

    style_fonts = sorted(f for f in char_map if f != content)
    common = set(char_map[content])
    for f in style_fonts:
        common &= char_map[f]
    chars = sorted(common)

    if n_seen_fonts < 1 or n_seen_chars < 1:
        raise DatasetError("need at least one seen font and one seen character")
    if n_seen_fonts >= len(style_fonts):
        raise DatasetError(
            f"too few fonts: {len(style_fonts)} style fonts leave none unseen with "
            f"n_seen_fonts={n_seen_fonts} (short by {n_seen_fonts - len(style_fonts) + 1})")
    if n_seen_chars >= len(chars):
        raise DatasetError(
            f"too few characters: {len(chars)} shared characters leave none unseen with "
            f"n_seen_chars={n_seen_chars} (short by {n_seen_chars - len(chars) + 1})")

    rng = np.random.default_rng(seed)
    font_perm = [style_fonts[i] for i in rng.permutation(len(style_fonts))]
    char_perm = [chars[i] for i in rng.permutation(len(chars))]
    seen_f, unseen_f = sorted(font_perm[:n_seen_fonts]), sorted(font_perm[n_seen_fonts:])
    seen_c, unseen_c = sorted(char_perm[:n_seen_chars]), sorted(char_perm[n_seen_chars:])
    splits = {
        "SFSC": {"fonts": seen_f, "chars": seen_c},
        "UFSC": {"fonts": unseen_f, "chars": seen_c},
        "UFUC": {"fonts": unseen_f, "chars": unseen_c},
    }
    holdout: list[list] = []
    if n_holdout:
        pairs = [(f, c) for f in seen_f for c in seen_c]
        if n_holdout >= len(pairs):
            raise DatasetError(f"n_holdout={n_holdout} exceeds the {len(pairs)} SFSC pairs")
        pick = rng.choice(len(pairs), size=n_holdout, replace=False)
        holdout = sorted([pairs[i][0], pairs[i][1]] for i in pick)

    keep_fonts = set(style_fonts) | {content}
    keep_chars = set(chars)
    entries = [
        {"font_id": f, "char_id": c, "path": f"{f}/{glyph_filename(c)}"}
        for f in sorted(keep_fonts) for c in sorted(char_map[f] & keep_chars)
    ]
    return DatasetManifest(
        entries=entries, splits=splits, content_font_id=content, seed=seed,
        canvas=info.get("canvas") or _probe_canvas(root, entries),
        root=str(root.resolve()), fonts=info.get("fonts", {}), holdout=holdout,
    )


def _probe_canvas(root: Path, entries: list[dict]) -> int:
    return Image.open(root / entries[0]["path"]).size[0]


@dataclass
class TrainingTriplet:
    content: GlyphImage
    references: list[GlyphImage]
    target: GlyphImage
    aux_references: list[GlyphImage] | None = None

    @property
    def font_id(self) -> str:
        return self.target.font_id


def _char_pool(manifest: DatasetManifest, split: str, font: str) -> list[int]:
    chars = [c for c in manifest.split_chars(split)
             if manifest.has(font, c) and manifest.has(manifest.content_font_id, c)]
    if split in ("SFSC", HOLDOUT_SPLIT):
        # holdout pairs never feed training; at eval they are targets only
        chars = [c for c in chars if not manifest.is_holdout(font, c)]
    return chars


def sample_triplet(manifest: DatasetManifest, split: str, k: int, rng: np.random.Generator,
                   with_aux: bool = False) -> TrainingTriplet:
    if k < 1:
        raise DatasetError(f"k must be >= 1, got {k}")
    fonts = manifest.split_fonts(split)
    if not fonts:
        raise DatasetError(f"split {split} has no fonts")
    need = 2 * k + 1 if with_aux else k + 1
    for fi in rng.permutation(len(fonts)):
        font = fonts[fi]
        pool = _char_pool(manifest, split, font)
        if len(pool) < need:
            continue
        picks = [pool[i] for i in rng.choice(len(pool), size=need, replace=False)]
        target_c, refs = picks[0], picks[1:k + 1]
        aux = picks[k + 1:] if with_aux else None
        return TrainingTriplet(
            content=manifest.content(target_c),
            references=[manifest.glyph(font, c) for c in refs],
            target=manifest.glyph(font, target_c),
            aux_references=[manifest.glyph(font, c) for c in aux] if aux is not None else None,
        )
    raise DatasetError(f"no font in split {split} has the {need} characters needed for k={k}")


def reference_chars(manifest: DatasetManifest, font: str, target: int, k: int, seed: int,
                    mode: str = "fixed", rng: np.random.Generator | None = None) -> list[int]:
    """Pick test-time references for ``target`` from the font's seen characters.

    ``fixed`` draws one seeded ordering per font and takes its first ``k``
    entries other than the target; ``random`` draws fresh from ``rng``.
    """
    base = _char_pool(manifest, "SFSC", font) or manifest.chars_of(font)
    pool = [c for c in base if c != target]
    if len(pool) < k:
        raise DatasetError(f"font {font} has only {len(pool)} reference characters, need {k}")
    if mode == "fixed":
        font_rng = np.random.default_rng([seed, zlib.crc32(font.encode())])
        order = [base[i] for i in font_rng.permutation(len(base))]
        return [c for c in order if c != target][:k]
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(seed)
        return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    raise DatasetError(f"unknown reference mode {mode!r}")

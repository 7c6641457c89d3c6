"""``vqfont`` command-line entry point.

Subcommands: render, pretrain, train, generate, eval, inspect-codebook, ablate.
Every config key is also a ``--flag`` (resolution order: defaults, then
``--config`` file, then flags).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_fields, load_config

log = logging.getLogger("vqfont")

SUBCOMMANDS = ("render", "pretrain", "train", "generate", "eval", "inspect-codebook", "ablate")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    group = p.add_argument_group("config keys (override the --config file)")
    group.add_argument("--config", help="YAML config file")
    defaults = RunConfig(fonts=[], chars="")
    for f in config_fields():
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        shown = "built-in list" if f.name in ("fonts", "chars") else default
        kw = dict(dest=f.name, default=None, help=f"{f.metadata.get('help', '')} (default: {shown})")
        if f.name == "fonts":
            kw["nargs"] = "+"
        elif isinstance(default, bool):
            kw["type"] = _bool
        elif isinstance(default, int):
            kw["type"] = int
        elif isinstance(default, float):
            kw["type"] = float
        group.add_argument(flag, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqfont", description="Few-shot glyph generation with a VQ component codebook.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("render", help="render fonts to PNGs and write manifest.json")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)

    p = sub.add_parser("pretrain", help="pretrain the content encoder and component codebook")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, dest="pretrain_steps_alias", help="alias for --pretrain-steps")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    _add_config_flags(p)

    p = sub.add_parser("train", help="adversarially train the generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vq-ckpt", required=True)
    p.add_argument("--steps", type=int, dest="train_steps_alias", help="alias for --train-steps")
    p.add_argument("--out", help="run directory (default: runs/<timestamp>)")
    _add_config_flags(p)

    p = sub.add_parser("generate", help="generate glyphs from reference images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--refs", required=True, help="comma-separated reference PNGs")
    p.add_argument("--chars", required=True, help="text file with the characters to generate")
    p.add_argument("--content-font", help="font file for content glyphs (default: the training template)")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="store_true", help="also write a contact sheet")

    p = sub.add_parser("eval", help="score a split and write a JSON report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="UFUC")
    p.add_argument("--k", type=int, help="references per glyph (default: config k_refs)")
    p.add_argument("--out", required=True,
                   help="report path (.json); a directory gets report.json and report.csv")
    _add_config_flags(p)

    p = sub.add_parser("inspect-codebook", help="code activation heatmaps and usage")
    p.add_argument("--vq-ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--code", type=int, action="append", help="code index (repeatable; default: all)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("--axis", required=True, choices=["codebook_size", "modules", "ref_count"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vq-ckpt", help="reuse a pretrained codebook (modules / ref_count axes)")
    p.add_argument("--ckpt", help="reuse a trained generator (ref_count axis)")
    p.add_argument("--split", default="UFUC")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    return parser


def _resolve_config(args, base: dict | None = None) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in config_fields()}
    if getattr(args, "pretrain_steps_alias", None) is not None:
        overrides["pretrain_steps"] = args.pretrain_steps_alias
    if getattr(args, "train_steps_alias", None) is not None:
        overrides["train_steps"] = args.train_steps_alias
    if base:
        merged = dict(base)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        overrides = merged
    return load_config(args.config, overrides)


def _cmd_render(args):
    from .data import build_manifest, font_id_for, render_dataset

    cfg = _resolve_config(args)
    content = cfg.content_font or font_id_for(cfg.fonts[0])
    root = render_dataset(cfg.fonts, cfg.chars, args.out, cfg.canvas, cfg.margin, content, args.workers)
    manifest = build_manifest(root, cfg.n_seen_fonts, cfg.n_seen_chars, seed=cfg.seed,
                              content_font_id=content, n_holdout=cfg.n_holdout)
    manifest.save(Path(args.out) / "manifest.json")
    (Path(args.out) / "config.yaml").write_text(cfg.dump())
    print(f"rendered {len(manifest.entries)} glyphs -> {Path(args.out) / 'manifest.json'}")


def _cmd_pretrain(args):
    from .codebook import code_usage, perplexity, pretrain_codebook, reconstruction_l1, template_images
    from .data import DatasetManifest

    cfg = _resolve_config(args)
    manifest = DatasetManifest.load(args.manifest)
    if args.canvas is None and cfg.canvas != manifest.canvas:
        cfg = cfg.replace(canvas=manifest.canvas)
    res = pretrain_codebook(manifest, cfg, checkpoint_path=args.out,
                            progress=lambda r: log.info("pretrain %s", r))
    with open(Path(args.out).with_suffix(".trace.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(res.trace[0]))
        w.writeheader()
        w.writerows(res.trace)
    imgs = template_images(manifest)
    usage = code_usage(imgs, res.encoder, res.codebook)
    print(json.dumps({"checkpoint": args.out, "l1": reconstruction_l1(res.model, imgs),
                      "codes_used": int((usage > 0).sum()), "perplexity": perplexity(usage)}))


def _cmd_train(args):
    from .codebook import load_codebook_checkpoint
    from .data import DatasetManifest
    from .trainer import train

    _, vq_cfg, _ = load_codebook_checkpoint(args.vq_ckpt)
    base = {k: getattr(vq_cfg, k) for k in ("canvas", "codebook_size", "dim", "width")}
    cfg = _resolve_config(args, base)
    for key in base:
        if getattr(cfg, key) != base[key]:
            raise ConfigError(f"{key}={getattr(cfg, key)} conflicts with the codebook checkpoint ({base[key]})")
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out or Path("runs") / time.strftime("%Y%m%d-%H%M%S"))
    res = train(manifest, args.vq_ckpt, cfg, out_dir=out,
                progress=lambda r, el: log.info("train %s (%.0fs)", r, el))
    print(f"run directory: {out}")
    _write_samples(res.generator, manifest, cfg, out / "samples")


def _write_samples(gen, manifest, cfg, out_dir):
    from .data import reference_chars

    out_dir.mkdir(parents=True, exist_ok=True)
    for font in manifest.split_fonts("UFSC")[:2]:
        chars = manifest.split_chars("UFUC")[:8] or manifest.split_chars("UFSC")[:8]
        refs = reference_chars(manifest, font, -1, cfg.k_refs, cfg.seed)
        imgs = gen.generate([manifest.content(c) for c in chars], [manifest.glyph(font, r) for r in refs])
        contact_sheet([manifest.glyph(font, r).pixels for r in refs],
                      imgs[:, 0].cpu().numpy()).save(out_dir / f"{font}.png")


def contact_sheet(refs, generated, cols: int = 8):
    """References on the first row, generated glyphs below."""
    from PIL import Image

    tiles = [np.asarray(r) for r in refs]
    c = tiles[0].shape[0] if tiles else generated.shape[-1]
    gen_tiles = list(generated)
    rows = 1 + (len(gen_tiles) + cols - 1) // cols
    sheet = np.ones((rows * c, cols * c), dtype=np.float32)
    for i, t in enumerate(tiles[:cols]):
        sheet[0:c, i * c:(i + 1) * c] = t
    for i, t in enumerate(gen_tiles):
        r, q = divmod(i, cols)
        sheet[(r + 1) * c:(r + 2) * c, q * c:(q + 1) * c] = t
    return Image.fromarray(np.rint((sheet.clip(-1, 1) + 1) * 127.5).astype(np.uint8), mode="L")


def _cmd_generate(args):
    from .data import GlyphImage, render_font
    from .trainer import load_generator

    gen, _, cfg, blob = load_generator(args.ckpt)
    ref_paths = [p for p in args.refs.split(",") if p]
    if not ref_paths:
        raise ValueError("no reference images given")
    refs = [GlyphImage.from_png(p) for p in ref_paths]
    text = Path(args.chars).read_text()
    chars = list(dict.fromkeys(ch for ch in text if not ch.isspace()))
    font_file = args.content_font or _template_font_file(cfg)
    content = render_font(font_file, chars, cfg.canvas, cfg.margin)
    if not content:
        raise ValueError("none of the requested characters can be rendered from the content font")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imgs = gen.generate(content, refs)[:, 0].cpu().numpy()
    for g, img in zip(content, imgs):
        GlyphImage(img, "generated", g.char_id).save(out / f"{g.char_id:04x}.png")
    if args.grid:
        contact_sheet([r.pixels for r in refs], imgs).save(out / "contact_sheet.png")
    print(f"wrote {len(imgs)} glyphs to {out}")


def _template_font_file(cfg: RunConfig) -> str:
    from .data import font_id_for

    want = cfg.content_font or font_id_for(cfg.fonts[0])
    for f in cfg.fonts:
        if font_id_for(f) == want:
            return f
    raise FileNotFoundError(f"template font {want!r} not found in the checkpoint config; pass --content-font")


def _cmd_eval(args):
    from .data import DatasetManifest
    from .evaluation import evaluate_split
    from .trainer import load_generator

    gen, _, ckpt_cfg, _ = load_generator(args.ckpt)
    cfg = _resolve_config(args, ckpt_cfg.to_dict())
    manifest = DatasetManifest.load(args.manifest)
    report = evaluate_split(gen, manifest, args.split, k=args.k or cfg.k_refs, seed=cfg.seed,
                            ref_mode=cfg.ref_mode, config=cfg.to_dict())
    out = Path(args.out)
    if out.is_dir() or args.out.endswith(("/", "\\")) or not out.suffix:
        out = out / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(json.dumps(report.aggregates))


def _cmd_inspect(args):
    from PIL import Image

    from .codebook import code_activation_map, code_usage, load_codebook_checkpoint, template_images
    from .data import DatasetManifest

    manifest = DatasetManifest.load(args.manifest)
    vq, cfg, _ = load_codebook_checkpoint(args.vq_ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    codes = args.code if args.code else list(range(cfg.codebook_size))
    chars = manifest.split_chars("SFSC")[:8]
    for code in codes:
        tiles = []
        for c in chars:
            glyph = manifest.content(c)
            heat = code_activation_map(glyph, code, vq.encoder, vq.quantizer.codes)
            up = np.kron(heat, np.ones((cfg.canvas // heat.shape[0],) * 2))
            tiles.append(np.concatenate([(glyph.pixels + 1) / 2, up], axis=0))
        img = np.concatenate(tiles, axis=1)
        Image.fromarray(np.rint(img * 255).astype(np.uint8), mode="L").save(out / f"code_{code:03d}.png")
    usage = code_usage(template_images(manifest), vq.encoder, vq.quantizer.codes)
    (out / "usage.json").write_text(json.dumps({"usage": usage.tolist()}))
    print(f"wrote {len(codes)} heatmaps to {out}")


def _cmd_ablate(args):
    from .codebook import load_codebook_checkpoint
    from .data import DatasetManifest
    from .evaluation import ablation_sweep, validate_axis
    from .trainer import load_generator

    manifest = DatasetManifest.load(args.manifest)
    raw = [v.strip() for v in args.values.split(",") if v.strip()]
    values = raw if args.axis == "modules" else [int(v) for v in raw]
    validate_axis(args.axis, values)
    vq = trained = None
    base = {"canvas": manifest.canvas}
    if args.vq_ckpt:
        vq, vq_cfg, _ = load_codebook_checkpoint(args.vq_ckpt)
        base.update({k: getattr(vq_cfg, k) for k in ("codebook_size", "dim", "width")})
    if args.ckpt:
        trained, _, ckpt_cfg, _ = load_generator(args.ckpt)
        base = ckpt_cfg.to_dict()
    cfg = _resolve_config(args, base)
    rows = ablation_sweep(args.axis, values, cfg, manifest, split=args.split, out_dir=args.out,
                          vq_model=vq, trained=trained, progress=lambda r: log.info("ablate %s", r))
    for row in rows:
        print(json.dumps(row))


HANDLERS = {
    "render": _cmd_render,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "inspect-codebook": _cmd_inspect,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args)
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"vqfont {args.command}: error: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


dispatch = main


if __name__ == "__main__":
    sys.exit(main())

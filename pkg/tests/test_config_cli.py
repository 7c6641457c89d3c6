import json
import subprocess
import sys

import pytest
import yaml

from vqfont.cli import build_parser, main
from vqfont.config import ConfigError, RunConfig, config_fields, load_config

from conftest import TINY_FONTS


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert (cfg.lambda_img, cfg.lambda_feat, cfg.lambda_cst) == (1.0, 1.0, 0.1)
    assert (cfg.heads, cfg.depth, cfg.dim) == (8, 3, 256)
    assert (cfg.alpha, cfg.beta) == (1.0, 0.1)
    assert (cfg.codebook_size, cfg.batch_size, cfg.train_steps) == (100, 48, 500_000)
    assert (cfg.pretrain_batch, cfg.pretrain_steps) == (256, 50_000)
    assert (cfg.lr_g, cfg.lr_d) == (1e-4, 2e-4)


def test_precedence(tmp_path, monkeypatch):
    p = tmp_path / "c.yaml"
    p.write_text("codebook_size: 64\nseed: 3\nk_refs: 5\n")
    cfg = load_config(p, {"codebook_size": 32, "k_refs": None})
    assert cfg.codebook_size == 32 and cfg.k_refs == 5 and cfg.seed == 3
    monkeypatch.setenv("VQFONT_SEED", "11")
    assert load_config(p).seed == 11
    assert load_config(p, {"seed": 2}).seed == 2


def test_unknown_key_named(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("codebok_size: 3\n")
    with pytest.raises(ConfigError, match="codebok_size"):
        load_config(p)


def test_invalid_values():
    with pytest.raises(ConfigError, match="heads must divide dim"):
        load_config(None, {"heads": 7, "dim": 256})
    with pytest.raises(ConfigError, match="variant"):
        load_config(None, {"variant": "half"})


def test_config_roundtrip(tmp_path):
    cfg = RunConfig(codebook_size=32, fonts=["a.ttf"], chars="AB")
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dump())
    assert load_config(p) == cfg


def _help(sub):
    return build_parser()._subparsers._group_actions[0].choices[sub].format_help()


@pytest.mark.parametrize("sub", ["render", "pretrain", "train", "eval", "ablate"])
def test_help_documents_every_key(sub):
    text = _help(sub)
    for f in config_fields():
        assert "--" + f.name.replace("_", "-") in text


def test_pretrain_help_shows_latent_weights():
    text = " ".join(_help("pretrain").split())
    assert "--alpha ALPHA codebook term weight in the latent loss (default: 1.0)" in text
    assert "--beta BETA commitment term weight in the latent loss (default: 0.1)" in text


def test_usage_errors_exit_2(capsys):
    for argv in (["bogus"], ["pretrain", "--nope"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_failure_is_one_line(tmp_path, capsys):
    code = main(["eval", "--ckpt", str(tmp_path / "missing.pt"), "--manifest", "m.json",
                 "--out", str(tmp_path / "r.json")])
    err = capsys.readouterr().err
    assert code != 0
    assert len(err.strip().splitlines()) == 1 and "missing.pt" in err


def test_console_script_exit_code():
    r = subprocess.run([sys.executable, "-m", "vqfont.cli", "frobnicate"], capture_output=True)
    assert r.returncode == 2


def test_cli_pipeline(tmp_path, monkeypatch):
    """render -> pretrain -> train -> generate -> eval -> inspect -> ablate at toy size."""
    monkeypatch.chdir(tmp_path)
    fonts = [str(f) for f in TINY_FONTS]
    assert main(["render", "--out", "ds", "--fonts", *fonts, "--chars", "ABCDEFGHIJKLMNOP",
                 "--canvas", "32", "--n-seen-fonts", "2", "--n-seen-chars", "11"]) == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert {"entries", "splits", "content_font_id", "seed", "canvas"} <= set(manifest)

    assert main(["pretrain", "--manifest", "ds/manifest.json", "--codebook-size", "8", "--dim", "16",
                 "--width", "4", "--heads", "4", "--steps", "3", "--pretrain-batch", "4",
                 "--out", "vq.pt"]) == 0
    assert (tmp_path / "vq.trace.csv").exists()

    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump({"depth": 1, "batch_size": 2, "k_refs": 2,
                                                        "log_every": 1}))
    assert main(["train", "--manifest", "ds/manifest.json", "--vq-ckpt", "vq.pt",
                 "--config", "cfg.yaml", "--steps", "2"]) == 0
    (run,) = (tmp_path / "runs").iterdir()
    assert {p.name for p in run.iterdir()} >= {"config.yaml", "checkpoints", "samples", "reports"}
    echoed = yaml.safe_load((run / "config.yaml").read_text())
    assert echoed["depth"] == 1 and echoed["codebook_size"] == 8
    ckpt = str(run / "checkpoints" / "generator.pt")

    refs = ",".join(str(tmp_path / "ds" / "STIXGeneralItalic" / f"{ord(c):04x}.png") for c in "AB")
    (tmp_path / "chars.txt").write_text("CD\nE")
    assert main(["generate", "--ckpt", ckpt, "--refs", refs, "--chars", "chars.txt",
                 "--out", "gen", "--grid"]) == 0
    assert {p.name for p in (tmp_path / "gen").iterdir()} == {"0043.png", "0044.png", "0045.png",
                                                             "contact_sheet.png"}

    assert main(["eval", "--ckpt", ckpt, "--manifest", "ds/manifest.json", "--split", "UFUC",
                 "--out", "rep/report.json"]) == 0
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert {"records", "aggregates", "config"} <= set(report)
    assert (tmp_path / "rep" / "report.csv").exists()
    assert main(["eval", "--ckpt", ckpt, "--manifest", "ds/manifest.json", "--split", "UFUC",
                 "--out", "rep2/"]) == 0
    assert (tmp_path / "rep2" / "report.json").exists()

    assert main(["inspect-codebook", "--vq-ckpt", "vq.pt", "--manifest", "ds/manifest.json",
                 "--code", "0", "--out", "insp"]) == 0
    assert (tmp_path / "insp" / "code_000.png").exists()

    assert main(["ablate", "--axis", "ref_count", "--values", "1,2", "--manifest", "ds/manifest.json",
                 "--ckpt", ckpt, "--out", "abl"]) == 0
    assert (tmp_path / "abl" / "ablation_ref_count.csv").exists()

    assert main(["train", "--manifest", "ds/manifest.json", "--vq-ckpt", "vq.pt", "--heads", "3"]) == 1

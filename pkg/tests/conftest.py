from pathlib import Path

import matplotlib
import pytest
import torch

from vqfont.config import RunConfig
from vqfont.data import build_manifest, render_dataset

FONT_DIR = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
TINY_FONTS = [FONT_DIR / n for n in (
    "DejaVuSans.ttf", "DejaVuSerif-Bold.ttf", "DejaVuSansMono-Oblique.ttf",
    "STIXGeneralItalic.ttf", "DejaVuSans-BoldOblique.ttf")]
TINY_CHARS = "ABCDEFGHIJKLMNOP"


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("VQFONT_SEED", raising=False)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    render_dataset(TINY_FONTS, TINY_CHARS, root, canvas=32, content_font="DejaVuSans")
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_root):
    # 4 style fonts: 2 seen, 2 unseen; 16 chars: 11 seen, 5 unseen
    return build_manifest(tiny_root, 2, 11, seed=0, n_holdout=4)


@pytest.fixture
def tiny_cfg():
    return RunConfig(canvas=32, width=4, dim=16, codebook_size=8, heads=4, depth=2,
                     pretrain_steps=30, pretrain_batch=8, train_steps=3, batch_size=4,
                     k_refs=2, log_every=1, checkpoint_every=2,
                     fonts=[str(f) for f in TINY_FONTS], chars=TINY_CHARS)


@pytest.fixture(scope="session")
def tiny_vq(tiny_manifest):
    from vqfont.codebook import pretrain_codebook

    cfg = RunConfig(canvas=32, width=4, dim=16, codebook_size=8, heads=4, depth=2,
                    pretrain_steps=30, pretrain_batch=8, fonts=[], chars="")
    return pretrain_codebook(tiny_manifest, cfg).model


@pytest.fixture
def torch_seed():
    torch.manual_seed(0)
    return 0

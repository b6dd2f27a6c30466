import numpy as np
import pytest

from quantaudit.weightstore import build_manifest, write_checkpoint


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_checkpoint(tmp_path, step=0, tensors=None, meta=None, name=None):
    if tensors is None:
        gen = np.random.default_rng(step)
        tensors = {
            "blocks.0.attn.qkv.weight": gen.normal(size=(24, 8)).astype(np.float32),
            "blocks.0.norm1.weight": gen.normal(size=(8,)).astype(np.float32),
            "tok_embed.weight": gen.normal(size=(16, 8)).astype(np.float32),
        }
    manifest = build_manifest(step, tensors, meta=meta)
    path = tmp_path / (name or f"step-{step:08d}")
    write_checkpoint(manifest, tensors, path)
    return manifest, tensors, path

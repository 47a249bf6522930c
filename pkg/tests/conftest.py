import numpy as np
import pytest

from subnetkit.model import ElasticModel, ModelConfig, adapted_shapes
from subnetkit.shapes import ShapeGrid
from subnetkit.smol import SMoLBank
from subnetkit.tensor import Rng
from subnetkit.width import build_width_plan, collect_stats

TINY = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_head=8, d_ffn=24, vocab_size=13, max_seq_len=10, dtype="float64")
TINY_GRID = ShapeGrid(depths=(2, 3, 4), ratios=(1.0, 0.75, 0.5), k_sample=3)


def make_model(cfg=TINY, seed=0, scale=5.0):
    m = ElasticModel.create(cfg, Rng(seed))
    for t in m.params.values():
        if t.ndim == 2:
            t.data *= scale
    return m


def make_bank(cfg=TINY, grid=TINY_GRID, seed=1, b_std=0.05, noise=False):
    rng = Rng(seed)
    bank = SMoLBank(adapted_shapes(cfg), grid.mask_dim, rng=rng, dtype=cfg.np_dtype, noise=noise)
    for b in bank.B.values():
        b.data = rng.normal(b.shape, b_std, cfg.np_dtype)
    bank.w_gate.data = rng.normal(bank.w_gate.shape, 1.0, cfg.np_dtype)
    return bank


def make_plan(model, grid=TINY_GRID, seed=2):
    rng = np.random.default_rng(seed)
    batches = [rng.integers(0, model.config.vocab_size, (4, model.config.max_seq_len)) for _ in range(3)]
    stats = collect_stats(model, batches, min_tokens=16)
    return build_width_plan(model, stats, grid.ratios)


@pytest.fixture
def tiny():
    return make_model()


@pytest.fixture
def full_elastic():
    m = make_model()
    m.attach_width_plan(make_plan(m))
    m.attach_bank(make_bank())
    return m

"""Optimiser, pretraining, and one-for-all fine-tuning of the SMoL adapter."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data import Corpus, perplexity
from .model import ElasticModel, ModelConfig
from .shapes import ShapeGrid, SubnetShape
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)


class NumericsError(FloatingPointError):
    pass


def adamw_update(p, g, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """In-place decoupled-weight-decay Adam update of ``p``; returns nothing."""
    if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
        raise ValueError(f"adamw: shape mismatch param {p.shape}, grad {g.shape}, state {m.shape}/{v.shape}")
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    if weight_decay:
        p -= lr * weight_decay * p
    p -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            if p.grad is None:
                continue
            adamw_update(p.data, p.grad, self.m[k], self.v[k], self.t, lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- pretraining -------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 3e-3
    warmup: int = 100
    min_lr_frac: float = 0.1
    seed: int = 0


def pretrain(config: ModelConfig, corpus: Corpus, hp: PretrainConfig, rng: Rng | None = None, progress=None) -> ElasticModel:
    """Train the dense model from scratch on the fact-bearing train stream."""
    rng = rng or Rng(hp.seed)
    if len(corpus.train) < config.max_seq_len + 1:
        raise ValueError("corpus too small for one batch")
    model = ElasticModel.create(config, rng.spawn(1))
    data_rng = rng.spawn(2)
    opt = AdamW(model.params, lr=hp.lr)
    for step in range(hp.steps):
        if step < hp.warmup:
            lr = hp.lr * (step + 1) / hp.warmup
        else:
            frac = (step - hp.warmup) / max(1, hp.steps - hp.warmup)
            lr = hp.lr * (hp.min_lr_frac + (1 - hp.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
        x, y = corpus.sample_batch(data_rng, hp.batch, config.max_seq_len)
        loss = tn.cross_entropy(model.forward(x), y)
        if not np.isfinite(loss.data):
            raise NumericsError(f"pretrain: non-finite loss at step {step}")
        loss.backward()
        opt.step(lr)
        opt.zero_grad()
        if progress is not None:
            progress(step, float(loss.data))
    return model


# -- one-for-all fine-tuning --------------------------------------------------------


@dataclass
class StepLosses:
    shapes: list[tuple[int, int]]
    l1: float
    distill: list[float]
    scales: list[float]
    total: float


def balance_scales(l1: float, distill, eps: float = 1e-8, enabled: bool = True) -> list[float]:
    """``|L1| / (|L_i| + eps)`` per student, or all ones when disabled."""
    if not enabled:
        return [1.0] * len(distill)
    vals = [float(abs(l1) / (abs(float(li)) + eps)) for li in distill]
    for s in vals:
        if not math.isfinite(s):
            raise NumericsError(f"balancing scale not finite (L1={l1}, distill={list(distill)})")
    return vals


def balanced_loss(l1: Tensor, distill: list[Tensor], eps: float = 1e-8, enabled: bool = True) -> Tensor:
    """``L1 + sum_i s_i L_i`` with the scales treated as constants."""
    for li in [l1, *distill]:
        if not np.isfinite(li.data):
            raise NumericsError("balanced_loss: non-finite component loss")
    scales = balance_scales(float(l1.data), [float(d.data) for d in distill], eps, enabled)
    total = l1
    for s, li in zip(scales, distill):
        total = total + li * s
    return total


def shape_id(grid: ShapeGrid, key: tuple[int, int]) -> str:
    d, w = key
    return f"d{grid.depths[d]}-w{grid.ratios[w]:.3f}"


def train_step(
    model: ElasticModel,
    grid: ShapeGrid,
    shapes: dict[tuple[int, int], SubnetShape],
    batch,
    optimizer: AdamW,
    rng: Rng,
    *,
    eps: float = 1e-8,
    balance: bool = True,
    keys: list[tuple[int, int]] | None = None,
) -> StepLosses:
    """One sandwich step: teacher first, then students, single optimiser update.

    Each subnet's graph is back-propagated as soon as its loss is known; since
    the balancing scales are constants this equals back-propagating the summed
    objective once.
    """
    x, y = batch
    keys = keys if keys is not None else grid.sandwich_sample(rng)
    teacher = shapes[keys[0]]
    logits = model.forward(x, teacher, training=False)
    l1 = tn.cross_entropy(logits, y)
    l1v = float(l1.data)
    if not math.isfinite(l1v):
        raise NumericsError(f"non-finite teacher loss on shape {shape_id(grid, keys[0])}")
    l1.backward()
    target = tn.softmax(tn.detach(logits))
    distill, scales = [], []
    for key in keys[1:]:
        out = model.forward(x, shapes[key], training=True, rng=rng)
        li = tn.soft_cross_entropy(out, target)
        liv = float(li.data)
        if not math.isfinite(liv):
            raise NumericsError(f"non-finite distillation loss on shape {shape_id(grid, key)}")
        (s,) = balance_scales(l1v, [liv], eps, balance)
        (li * s).backward()
        distill.append(liv)
        scales.append(s)
    optimizer.step()
    optimizer.zero_grad()
    total = l1v + sum(s * d for s, d in zip(scales, distill))
    return StepLosses(list(keys), l1v, distill, scales, total)


@dataclass
class FinetuneConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 2e-4
    eps: float = 1e-8
    balance: bool = True
    noise: bool = True
    n_loras: int = 5
    rank: int = 4
    top_k: int = 2
    checkpoint_every: int = 500
    seed: int = 0


@dataclass
class FinetuneLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, step: int, grid: ShapeGrid, sl: StepLosses) -> None:
        self.rows.append((step, shape_id(grid, sl.shapes[0]), sl.l1, "", 1.0))
        for key, d, s in zip(sl.shapes[1:], sl.distill, sl.scales):
            self.rows.append((step, shape_id(grid, key), sl.l1, d, s))

    def to_csv(self) -> str:
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "shape_id", "l1", "l_i", "s_i"])
        for r in self.rows:
            w.writerow([r[0], r[1], repr(r[2]), "" if r[3] == "" else repr(r[3]), repr(r[4])])
        return buf.getvalue()


def finetune(
    model: ElasticModel,
    grid: ShapeGrid,
    shapes: dict[tuple[int, int], SubnetShape],
    corpus: Corpus,
    hp: FinetuneConfig,
    rng: Rng | None = None,
    progress=None,
    on_checkpoint=None,
) -> FinetuneLog:
    """Joint fine-tuning of the attached bank over the whole grid (base frozen).

    ``on_checkpoint(step)`` fires every ``hp.checkpoint_every`` completed steps.
    """
    if model.bank is None:
        raise ValueError("finetune: attach an SMoL bank first")
    rng = rng or Rng(hp.seed)
    model.freeze_base()
    opt = AdamW(model.bank.parameters(), lr=hp.lr)
    sample_rng, data_rng = rng.spawn(10), rng.spawn(11)
    out = FinetuneLog()
    for step in range(hp.steps):
        batch = corpus.sample_batch(data_rng, hp.batch, model.config.max_seq_len, stream="text_train")
        sl = train_step(model, grid, shapes, batch, opt, sample_rng, eps=hp.eps, balance=hp.balance)
        out.add(step, grid, sl)
        if progress is not None:
            progress(step, sl)
        done = step + 1
        if on_checkpoint is not None and hp.checkpoint_every and done % hp.checkpoint_every == 0 and done < hp.steps:
            on_checkpoint(done)
    return out


def grid_perplexities(model, shapes: dict, tokens, n_tokens=None) -> dict:
    return {k: perplexity(model, s, tokens, n_tokens=n_tokens) for k, s in shapes.items()}

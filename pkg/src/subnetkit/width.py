"""Fluctuation-based width selection with output-bias compensation.

For every block the inputs of its last matrix (attention output projection,
FFN down projection) are summarised by per-channel mean and population
variance over calibration tokens. A channel's importance is its variance
times the squared norm of the matching weight column. Scores are normalised
within each block, ranked globally across blocks, and cut at each width ratio,
so deeper ratios keep nested subsets. Pruned channels are replaced by their
calibration mean folded into a per-block output bias.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class ChannelStats:
    count: int
    mean: np.ndarray
    m2: np.ndarray  # sum of squared deviations

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / self.count

    @classmethod
    def of(cls, x: np.ndarray) -> "ChannelStats":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        mu = x.mean(axis=0)
        return cls(x.shape[0], mu, ((x - mu) ** 2).sum(axis=0))

    def merge(self, other: "ChannelStats") -> "ChannelStats":
        """Chan et al. pairwise combination."""
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return ChannelStats(n, mean, m2)


ActivationStats = dict  # block name ("layers.{i}.o" / "layers.{i}.down") -> ChannelStats


def collect_stats(model, batches, min_tokens: int = 256) -> ActivationStats:
    """Per-channel statistics of each block's last-matrix inputs (full model, no adapter)."""
    batches = list(batches)
    if not batches:
        raise ValueError("collect_stats: empty calibration set")
    stats: ActivationStats = {}
    for tokens in batches:
        cap: dict = {}
        with no_grad():
            model.forward(tokens, None, capture=cap, use_adapter=False)
        for name, x in cap.items():
            s = ChannelStats.of(x)
            stats[name] = s if name not in stats else stats[name].merge(s)
    n = min(s.count for s in stats.values())
    if n < min_tokens:
        raise ValueError(f"collect_stats: only {n} tokens, need at least {min_tokens}")
    return dict(sorted(stats.items()))


def block_names(n_layers: int) -> list[str]:
    return [f"layers.{i}.{m}" for i in range(n_layers) for m in ("o", "down")]


def score(stats: ActivationStats, weights: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Raw fluctuation score: variance_i * ||W[:, i]||^2 for each block."""
    out = {}
    for name, w in weights.items():
        if name not in stats:
            raise KeyError(f"score: missing statistics for block {name!r}")
        st = stats[name]
        w = np.asarray(w, dtype=np.float64)
        if w.shape[1] != st.mean.shape[0]:
            raise ValueError(f"score: {name} weight has {w.shape[1]} inputs, stats have {st.mean.shape[0]}")
        out[name] = st.variance * (w * w).sum(axis=0)
    return out


def normalize(raw: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, s in raw.items():
        total = s.sum()
        out[name] = s / total if total > 0 else np.zeros_like(s)
    return out


def build_masks(
    raw: dict[str, np.ndarray],
    ratios,
    group_sizes: dict[str, int] | None = None,
) -> list[dict[str, np.ndarray]]:
    """Nested channel masks for each ratio from one global ranking.

    ``group_sizes`` makes a block's channels move in contiguous groups (whole
    attention heads); a group's score is the mean of its channels'.
    Returns one ``{block: bool channel mask}`` dict per ratio.
    """
    ratios = [float(r) for r in ratios]
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"width ratio {r} outside (0, 1]")
    if ratios != sorted(ratios, reverse=True):
        raise ValueError("ratios must be sorted descending")
    group_sizes = group_sizes or {}
    normed = normalize(raw)
    names = list(raw)
    groups = []  # (-score, block order, group index, block, size)
    for bi, name in enumerate(names):
        s = normed[name]
        g = group_sizes.get(name, 1)
        if len(s) % g:
            raise ValueError(f"{name}: {len(s)} channels not divisible by group size {g}")
        per = s.reshape(-1, g).mean(axis=1)
        for gi, v in enumerate(per):
            groups.append((-float(v), bi, gi, name, g))
    groups.sort(key=lambda t: (t[0], t[1], t[2]))
    total = sum(len(s) for s in raw.values())
    out = []
    for r in ratios:
        target = math.ceil(r * total - 1e-9)
        masks = {name: np.zeros(len(raw[name]), dtype=bool) for name in names}
        kept = 0
        for _, _, gi, name, g in groups:
            if kept >= target:
                break
            masks[name][gi * g : (gi + 1) * g] = True
            kept += g
        out.append(masks)
    return out


def compensate(weights: dict[str, np.ndarray], stats: ActivationStats, masks: dict[str, np.ndarray]):
    """Bias ``W @ ((1 - M) * mean)`` replacing the average contribution of pruned inputs."""
    out = {}
    for name, m in masks.items():
        w = np.asarray(weights[name], dtype=np.float64)
        mu = stats[name].mean
        if m.shape[0] != mu.shape[0] or w.shape[1] != m.shape[0]:
            raise ValueError(f"compensate: {name} mask {m.shape}, mean {mu.shape}, weight {w.shape}")
        out[name] = w @ ((~m).astype(np.float64) * mu)
    return out


@dataclass
class WidthPlan:
    ratios: list[float]
    n_layers: int
    n_heads: int
    d_head: int
    raw_scores: dict[str, np.ndarray]
    masks: list[dict[str, np.ndarray]]  # per ratio, channel-level
    biases: list[dict[str, np.ndarray]]  # per ratio
    dtype: str = "float32"
    _cache: dict = field(default_factory=dict, repr=False)

    def head_index(self, layer: int, width_index: int) -> np.ndarray:
        key = ("h", layer, width_index)
        if key not in self._cache:
            m = self.masks[width_index][f"layers.{layer}.o"].reshape(self.n_heads, self.d_head)
            self._cache[key] = np.flatnonzero(m.all(axis=1))
        return self._cache[key]

    def ffn_index(self, layer: int, width_index: int) -> np.ndarray:
        key = ("f", layer, width_index)
        if key not in self._cache:
            self._cache[key] = np.flatnonzero(self.masks[width_index][f"layers.{layer}.down"])
        return self._cache[key]

    def bias(self, layer: int, kind: str, width_index: int) -> np.ndarray:
        name = f"layers.{layer}.{'o' if kind == 'attn' else 'down'}"
        key = ("b", name, width_index)
        if key not in self._cache:
            self._cache[key] = self.biases[width_index][name].astype(self.dtype)
        return self._cache[key]

    def retained_fraction(self, width_index: int) -> float:
        m = self.masks[width_index]
        return sum(int(v.sum()) for v in m.values()) / sum(v.size for v in m.values())

    def to_json(self) -> str:
        d = {
            "ratios": self.ratios,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_head": self.d_head,
            "dtype": self.dtype,
            "scores": {k: v.tolist() for k, v in self.raw_scores.items()},
            "masks": [{k: "".join("1" if b else "0" for b in v) for k, v in m.items()} for m in self.masks],
            "biases": [{k: v.tolist() for k, v in b.items()} for b in self.biases],
        }
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WidthPlan":
        d = json.loads(text)
        return cls(
            ratios=[float(r) for r in d["ratios"]],
            n_layers=d["n_layers"],
            n_heads=d["n_heads"],
            d_head=d["d_head"],
            dtype=d.get("dtype", "float32"),
            raw_scores={k: np.array(v) for k, v in d["scores"].items()},
            masks=[{k: np.array([c == "1" for c in v]) for k, v in m.items()} for m in d["masks"]],
            biases=[{k: np.array(v) for k, v in b.items()} for b in d["biases"]],
        )


def build_width_plan(model, stats: ActivationStats, ratios) -> WidthPlan:
    cfg = model.config
    names = block_names(cfg.n_layers)
    weights = {n: model.params[n].data for n in names}
    raw = score(stats, weights)
    groups = {n: cfg.d_head for n in names if n.endswith(".o")}
    masks = build_masks(raw, ratios, groups)
    biases = [compensate(weights, stats, m) for m in masks]
    return WidthPlan(
        ratios=[float(r) for r in ratios],
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_head=cfg.d_head,
        raw_scores=raw,
        masks=masks,
        biases=biases,
        dtype=cfg.dtype,
    )

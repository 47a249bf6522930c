"""Decoder-only transformer with elastic (depth, width) execution."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .shapes import SubnetShape
from .smol import SMoLBank, merge
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    d_ffn: int = 256
    vocab_size: int = 96
    max_seq_len: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        for f in ("n_layers", "d_model", "n_heads", "d_head", "d_ffn", "vocab_size", "max_seq_len"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"ModelConfig.{f} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"ModelConfig.dtype must be float32 or float64, got {self.dtype}")

    @property
    def attn_width(self) -> int:
        return self.n_heads * self.d_head

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


def adapted_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """(out, in) of every matrix that carries a LoRA bank."""
    a, d, f = cfg.attn_width, cfg.d_model, cfg.d_ffn
    per = {"q": (a, d), "k": (a, d), "v": (a, d), "o": (d, a), "gate": (f, d), "up": (f, d), "down": (d, f)}
    return {f"layers.{i}.{m}": s for i in range(cfg.n_layers) for m, s in per.items()}


def init_parameters(cfg: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    dt = cfg.np_dtype
    std = 0.02
    proj_std = std / math.sqrt(2 * cfg.n_layers)
    shapes = adapted_shapes(cfg)
    p: dict[str, Tensor] = {}
    p["tok_emb"] = tn.parameter(rng.normal((cfg.vocab_size, cfg.d_model), std, dt), dt)
    p["pos_emb"] = tn.parameter(rng.normal((cfg.max_seq_len, cfg.d_model), std, dt), dt)
    for i in range(cfg.n_layers):
        p[f"layers.{i}.attn_norm"] = tn.parameter(np.ones(cfg.d_model, dt), dt)
        p[f"layers.{i}.ffn_norm"] = tn.parameter(np.ones(cfg.d_model, dt), dt)
        for m in ("q", "k", "v", "o", "gate", "up", "down"):
            s = proj_std if m in ("o", "down") else std
            p[f"layers.{i}.{m}"] = tn.parameter(rng.normal(shapes[f"layers.{i}.{m}"], s, dt), dt)
    p["final_norm"] = tn.parameter(np.ones(cfg.d_model, dt), dt)
    p["head"] = tn.parameter(rng.normal((cfg.vocab_size, cfg.d_model), std, dt), dt)
    return dict(sorted(p.items()))


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


class ElasticModel:
    """Base weights plus optional SMoL bank and width plan.

    ``forward(tokens)`` with no shape is the plain dense model.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.bank: SMoLBank | None = None
        self.width_plan = None

    @classmethod
    def create(cls, config: ModelConfig, rng: Rng) -> "ElasticModel":
        return cls(config, init_parameters(config, rng))

    def attach_bank(self, bank: SMoLBank | None) -> None:
        self.bank = bank

    def attach_width_plan(self, plan) -> None:
        self.width_plan = plan

    def freeze_base(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze_base(self) -> None:
        for t in self.params.values():
            t.requires_grad = True

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    # -- forward --------------------------------------------------------------------

    def _proj(self, x, name, gate_out, out_idx=None, in_idx=None):
        w = self.params[name]
        if out_idx is not None:
            w = tn.take(w, out_idx, 0)
        if in_idx is not None:
            w = tn.take(w, in_idx, 1)
        y = tn.linear(x, w)
        if gate_out is not None:
            y = y + self.bank.apply(name, x, gate_out, out_idx, in_idx)
        return y

    def _attention(self, x, i, gate_out, heads, capture):
        cfg = self.config
        b, t, _ = x.shape
        dh = cfg.d_head
        ch = None if heads is None else (heads[:, None] * dh + np.arange(dh)).reshape(-1)
        nh = cfg.n_heads if heads is None else len(heads)
        pre = f"layers.{i}."

        def split(z):
            return tn.transpose(tn.reshape(z, (b, t, nh, dh)), (0, 2, 1, 3))

        q = split(self._proj(x, pre + "q", gate_out, out_idx=ch))
        k = split(self._proj(x, pre + "k", gate_out, out_idx=ch))
        v = split(self._proj(x, pre + "v", gate_out, out_idx=ch))
        ctx = tn.reshape(tn.transpose(tn.causal_attention(q, k, v), (0, 2, 1, 3)), (b, t, nh * dh))
        if capture is not None:
            capture[pre + "o"] = ctx.data.reshape(-1, nh * dh)
        return self._proj(ctx, pre + "o", gate_out, in_idx=ch)

    def _ffn(self, x, i, gate_out, channels, capture):
        pre = f"layers.{i}."
        g = self._proj(x, pre + "gate", gate_out, out_idx=channels)
        u = self._proj(x, pre + "up", gate_out, out_idx=channels)
        h = tn.silu(g) * u
        if capture is not None:
            capture[pre + "down"] = h.data.reshape(-1, h.shape[-1])
        return self._proj(h, pre + "down", gate_out, in_idx=channels)

    def forward(
        self,
        tokens,
        shape: SubnetShape | None = None,
        *,
        training: bool = False,
        rng: Rng | None = None,
        gate_out=None,
        capture: dict | None = None,
        use_adapter: bool = True,
    ) -> Tensor:
        """Logits of shape (batch, seq, vocab) for integer ``tokens``."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        retained = [1] * cfg.n_layers
        width_index = 0
        if shape is not None:
            if len(shape.retained_layers) != cfg.n_layers:
                raise ValueError(
                    f"retained_layers has length {len(shape.retained_layers)}, model has {cfg.n_layers} layers"
                )
            retained = list(shape.retained_layers)
            width_index = shape.width_index
            if width_index and self.width_plan is None:
                raise ValueError("width index > 0 requires an attached width plan")
            if self.width_plan is not None and width_index >= len(self.width_plan.ratios):
                raise ValueError(f"width index {width_index} outside the width plan")
        if gate_out is None and use_adapter and self.bank is not None and shape is not None and shape.gate_mask:
            gate_out = self.bank.gate(shape.gate_mask, rng, training)
        if self.bank is None or not use_adapter or (shape is not None and not shape.gate_mask):
            gate_out = None

        p = self.params
        x = tn.embedding(p["tok_emb"], tokens) + tn.take(p["pos_emb"], np.arange(t), 0)
        plan = self.width_plan if width_index else None
        for i in range(cfg.n_layers):
            if not retained[i]:
                continue
            heads = plan.head_index(i, width_index) if plan is not None else None
            chans = plan.ffn_index(i, width_index) if plan is not None else None
            h = tn.rms_norm(x, p[f"layers.{i}.attn_norm"])
            if heads is None or len(heads):
                a = self._attention(h, i, gate_out, heads, capture)
            else:
                a = Tensor(np.zeros_like(x.data))
            if plan is not None:
                a = a + Tensor(plan.bias(i, "attn", width_index))
            x = x + a
            h = tn.rms_norm(x, p[f"layers.{i}.ffn_norm"])
            if chans is None or len(chans):
                f = self._ffn(h, i, gate_out, chans, capture)
            else:
                f = Tensor(np.zeros_like(x.data))
            if plan is not None:
                f = f + Tensor(plan.bias(i, "ffn", width_index))
            x = x + f
        x = tn.rms_norm(x, p["final_norm"])
        return tn.linear(x, p["head"])

    __call__ = forward

    # -- deployment -----------------------------------------------------------------

    def extract(self, shape: SubnetShape, grid=None) -> "DenseModel":
        return extract(self, shape, grid)


def _slices(cfg: ModelConfig, plan, layer: int, width_index: int):
    heads = plan.head_index(layer, width_index) if (plan is not None and width_index) else None
    chans = plan.ffn_index(layer, width_index) if (plan is not None and width_index) else None
    if heads is None:
        heads = np.arange(cfg.n_heads)
    if chans is None:
        chans = np.arange(cfg.d_ffn)
    ch = (np.asarray(heads)[:, None] * cfg.d_head + np.arange(cfg.d_head)).reshape(-1)
    return np.asarray(heads, dtype=int), np.asarray(chans, dtype=int), ch


def extract(model: ElasticModel, shape: SubnetShape, grid=None) -> "DenseModel":
    """Standalone dense model: layers dropped, channels sliced, LoRAs merged, biases baked."""
    cfg = model.config
    if len(shape.retained_layers) != cfg.n_layers:
        raise ValueError("retained_layers length does not match the model")
    if grid is not None and shape.key not in grid.keys:
        raise ValueError(f"shape {shape.key} outside grid")
    plan = model.width_plan
    wi = shape.width_index
    if wi and plan is None:
        raise ValueError("width index > 0 requires an attached width plan")
    if plan is not None and wi >= len(plan.ratios):
        raise ValueError(f"width index {wi} outside the width plan")
    p = {k: v.data for k, v in model.params.items()}
    out = {
        "tok_emb": p["tok_emb"].copy(),
        "pos_emb": p["pos_emb"].copy(),
        "final_norm": p["final_norm"].copy(),
        "head": p["head"].copy(),
    }
    heads_per_layer = []
    ffn_per_layer = []
    j = 0
    for i in range(cfg.n_layers):
        if not shape.retained_layers[i]:
            continue
        heads, chans, ch = _slices(cfg, plan, i, wi)
        pre = f"layers.{i}."
        restrict = {
            pre + "q": (ch, None),
            pre + "k": (ch, None),
            pre + "v": (ch, None),
            pre + "o": (None, ch),
            pre + "gate": (chans, None),
            pre + "up": (chans, None),
            pre + "down": (None, chans),
        }
        deltas = merge(model.bank, shape.gate_mask, restrict) if (model.bank is not None and shape.gate_mask) else {}
        dst = f"layers.{j}."
        out[dst + "attn_norm"] = p[pre + "attn_norm"].copy()
        out[dst + "ffn_norm"] = p[pre + "ffn_norm"].copy()
        for name, (rows, cols) in restrict.items():
            w = p[name]
            if rows is not None:
                w = w[rows]
            if cols is not None:
                w = w[:, cols]
            w = np.array(w, copy=True)
            if name in deltas:
                w = w + deltas[name]
            out[dst + name.rsplit(".", 1)[1]] = w
        if wi:
            out[dst + "o_bias"] = np.array(plan.bias(i, "attn", wi), copy=True)
            out[dst + "down_bias"] = np.array(plan.bias(i, "ffn", wi), copy=True)
        heads_per_layer.append(len(heads))
        ffn_per_layer.append(len(chans))
        j += 1
    meta = {
        "d_model": cfg.d_model,
        "d_head": cfg.d_head,
        "vocab_size": cfg.vocab_size,
        "max_seq_len": cfg.max_seq_len,
        "dtype": cfg.dtype,
        "heads": heads_per_layer,
        "ffn": ffn_per_layer,
        "source_layers": [i for i in range(cfg.n_layers) if shape.retained_layers[i]],
        "width_index": wi,
    }
    return DenseModel(meta, out)


class DenseModel:
    """A physically sliced model, evaluated with plain numpy (no graph)."""

    def __init__(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.meta = meta
        self.arrays = dict(sorted(arrays.items()))

    @property
    def n_layers(self) -> int:
        return len(self.meta["heads"])

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def forward(self, tokens) -> np.ndarray:
        p = self.arrays
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        dh = self.meta["d_head"]
        x = p["tok_emb"][tokens] + p["pos_emb"][:t]
        causal = _causal_mask(t)
        for j in range(self.n_layers):
            pre = f"layers.{j}."
            nh = self.meta["heads"][j]
            h = _rms(x, p[pre + "attn_norm"])
            if nh:
                def split(z):
                    return z.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)

                q, k, v = (split(h @ p[pre + m].T) for m in ("q", "k", "v"))
                s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
                s = np.where(causal, -np.inf, s)
                s = np.exp(s - s.max(axis=-1, keepdims=True))
                s = s / s.sum(axis=-1, keepdims=True)
                ctx = (s @ v).transpose(0, 2, 1, 3).reshape(b, t, nh * dh)
                a = ctx @ p[pre + "o"].T
            else:
                a = np.zeros_like(x)
            if pre + "o_bias" in p:
                a = a + p[pre + "o_bias"]
            x = x + a
            h = _rms(x, p[pre + "ffn_norm"])
            if self.meta["ffn"][j]:
                g = h @ p[pre + "gate"].T
                f = (g / (1.0 + np.exp(-g))) * (h @ p[pre + "up"].T)
                f = f @ p[pre + "down"].T
            else:
                f = np.zeros_like(x)
            if pre + "down_bias" in p:
                f = f + p[pre + "down_bias"]
            x = x + f
        return _rms(x, p["final_norm"]) @ p["head"].T

    __call__ = forward


def _rms(x: np.ndarray, w: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * w

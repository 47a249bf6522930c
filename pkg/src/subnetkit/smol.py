"""Shape-aware mixture of LoRAs.

Each adapted matrix owns ``T`` low-rank pairs ``(A_i, B_i)``. A single gate,
shared by every matrix, maps the subnet's one-hot shape mask to sparse mixing
coefficients via noisy top-k routing. Because the gate never sees the input
tokens, the mixture for a given shape collapses to one dense delta per matrix
and can be merged into the base weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Rng, Tensor

ADAPTED = ("q", "k", "v", "o", "gate", "up", "down")
PREFIX = "smol."


@dataclass
class GateOutput:
    coefficients: Tensor  # length T, zeros outside the active set
    active: np.ndarray  # ascending indices of the kept experts

    def values(self) -> np.ndarray:
        return self.coefficients.data


class SMoLBank:
    def __init__(
        self,
        matrix_shapes: dict[str, tuple[int, int]],
        mask_dim: int,
        n_loras: int = 5,
        rank: int = 4,
        top_k: int = 2,
        noise: bool = True,
        rng: Rng | None = None,
        dtype=np.float32,
        a_std: float = 0.02,
    ):
        if not 1 <= top_k <= n_loras:
            raise ValueError(f"top_k must be in [1, {n_loras}], got {top_k}")
        rng = rng or Rng(0)
        self.n_loras = n_loras
        self.rank = rank
        self.top_k = top_k
        self.noise = noise
        self.mask_dim = mask_dim
        self.A: dict[str, Tensor] = {}
        self.B: dict[str, Tensor] = {}
        for name in sorted(matrix_shapes):
            out_f, in_f = matrix_shapes[name]
            self.A[name] = tn.parameter(rng.normal((n_loras, rank, in_f), a_std, dtype), dtype)
            self.B[name] = tn.parameter(np.zeros((n_loras, out_f, rank), dtype), dtype)
        self.w_gate = tn.parameter(rng.normal((mask_dim, n_loras), a_std, dtype), dtype)
        self.w_noise = tn.parameter(np.zeros((mask_dim, n_loras), dtype), dtype)

    @property
    def dtype(self):
        return self.w_gate.dtype

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in self.A:
            out[f"{PREFIX}{name}.A"] = self.A[name]
            out[f"{PREFIX}{name}.B"] = self.B[name]
        out[f"{PREFIX}w_gate"] = self.w_gate
        out[f"{PREFIX}w_noise"] = self.w_noise
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for key, t in self.parameters().items():
            if key not in arrays:
                raise KeyError(f"missing adapter tensor {key}")
            if arrays[key].shape != t.shape:
                raise ValueError(f"{key}: shape {arrays[key].shape} != {t.shape}")
            t.data = np.array(arrays[key], dtype=t.dtype)

    def meta(self) -> dict:
        return {
            "n_loras": self.n_loras,
            "rank": self.rank,
            "top_k": self.top_k,
            "noise": self.noise,
            "mask_dim": self.mask_dim,
        }

    # -- routing -----------------------------------------------------------------

    def gate(self, mask, rng: Rng | None = None, training: bool = False) -> GateOutput:
        return gate(self, mask, rng, training)

    def apply(
        self,
        name: str,
        x: Tensor,
        gate_out: GateOutput,
        out_idx=None,
        in_idx=None,
    ) -> Tensor:
        """Adapter contribution ``sum_i g_i B_i A_i x`` for matrix ``name``.

        Only the active experts are touched. ``out_idx``/``in_idx`` restrict
        the delta to retained rows/columns of a width-shrunk matrix.
        """
        if name not in self.A:
            raise KeyError(f"unknown adapted matrix {name!r}")
        act = gate_out.active
        k, r = len(act), self.rank
        a = tn.take(self.A[name], act, 0)  # (k, r, in)
        if in_idx is not None:
            a = tn.take(a, in_idx, 2)
        a = tn.reshape(a, (k * r, a.shape[2]))
        b = tn.take(self.B[name], act, 0)  # (k, out, r)
        if out_idx is not None:
            b = tn.take(b, out_idx, 1)
        b = tn.reshape(tn.transpose(b, (1, 0, 2)), (b.shape[1], k * r))
        coef = tn.take(gate_out.coefficients, np.repeat(act, r), 0)
        return tn.linear(tn.linear(x, a) * coef, b)


def gate(bank: SMoLBank, mask, rng: Rng | None = None, training: bool = False) -> GateOutput:
    """Noisy top-k gate driven by the one-hot shape mask."""
    m = np.asarray(mask, dtype=bank.dtype).reshape(1, -1)
    if m.shape[1] != bank.mask_dim:
        raise ValueError(f"gate: mask has dimension {m.shape[1]}, expected {bank.mask_dim}")
    mt = Tensor(m, dtype=bank.dtype)
    h = tn.matmul(mt, bank.w_gate)
    if training and bank.noise:
        if rng is None:
            raise ValueError("gate: training with noise needs an rng")
        eps = Tensor(rng.normal((1, bank.n_loras), 1.0, bank.dtype), dtype=bank.dtype)
        h = h + eps * tn.softplus(tn.matmul(mt, bank.w_noise))
    h = tn.reshape(h, (bank.n_loras,))
    # stable sort on -h: ties keep the lower index
    order = np.argsort(-h.data, kind="stable")
    active = np.sort(order[: bank.top_k])
    drop = np.ones(bank.n_loras, dtype=bool)
    drop[active] = False
    coeffs = tn.softmax(tn.masked_fill(h, drop, -np.inf))
    return GateOutput(coeffs, active)


def composite(bank: SMoLBank, name: str, gate_out: GateOutput, base: Tensor) -> Tensor:
    """Effective dense weight ``W_base + sum_i g_i B_i A_i``."""
    if name not in bank.A:
        raise KeyError(f"unknown adapted matrix {name!r}")
    w = base
    for i in gate_out.active:
        g = tn.take(gate_out.coefficients, [int(i)], 0)
        a = tn.reshape(tn.take(bank.A[name], [int(i)], 0), bank.A[name].shape[1:])
        b = tn.reshape(tn.take(bank.B[name], [int(i)], 0), bank.B[name].shape[1:])
        w = w + tn.matmul(b, a) * g
    return w


def merge(
    bank: SMoLBank,
    mask,
    restrict: dict[str, tuple] | None = None,
    *,
    noise: bool = False,
) -> dict[str, np.ndarray]:
    """Dense per-matrix deltas for one shape, optionally sliced.

    ``restrict`` maps matrix name to ``(row_idx, col_idx)``; either may be
    None for "keep all". Matrices absent from ``restrict`` are skipped when
    ``restrict`` is given.
    """
    if noise:
        raise ValueError("merge: gate noise must be off at merge time")
    with tn.no_grad():
        g = gate(bank, mask, training=False)
    coef = g.values()
    names = sorted(bank.A) if restrict is None else sorted(restrict)
    out = {}
    for name in names:
        if name not in bank.A:
            raise KeyError(f"unknown adapted matrix {name!r}")
        a_all, b_all = bank.A[name].data, bank.B[name].data
        delta = np.zeros((b_all.shape[1], a_all.shape[2]), dtype=bank.dtype)
        for i in g.active:
            delta += coef[i] * (b_all[i] @ a_all[i])
        if restrict is not None:
            rows, cols = restrict[name]
            if rows is not None:
                delta = delta[np.asarray(rows)]
            if cols is not None:
                delta = delta[:, np.asarray(cols)]
        out[name] = delta
    return out

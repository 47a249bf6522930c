"""Efficiency model, latency profiling and hierarchical subnet search."""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ElasticModel, extract
from .shapes import ShapeGrid, SubnetShape

try:  # pin BLAS to one thread while timing, when available
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def layer_widths(model: ElasticModel, shape: SubnetShape) -> list[tuple[int, int]]:
    """(heads, ffn channels) of every retained layer."""
    cfg = model.config
    plan = model.width_plan if shape.width_index else None
    out = []
    for i, keep in enumerate(shape.retained_layers):
        if not keep:
            continue
        if plan is None:
            out.append((cfg.n_heads, cfg.d_ffn))
        else:
            out.append((len(plan.head_index(i, shape.width_index)), len(plan.ffn_index(i, shape.width_index))))
    return out


def count_params(model: ElasticModel, shape: SubnetShape) -> int:
    """Closed-form parameter count of ``extract(model, shape)``."""
    cfg = model.config
    d, v, t, dh = cfg.d_model, cfg.vocab_size, cfg.max_seq_len, cfg.d_head
    total = 2 * v * d + t * d + d  # token table, head, positions, final norm
    for h, f in layer_widths(model, shape):
        total += 2 * d  # norms
        total += 4 * d * h * dh  # q, k, v, o
        total += 3 * d * f  # gate, up, down
        if shape.width_index:
            total += 2 * d  # compensation biases
    return total


def count_flops(model: ElasticModel, shape: SubnetShape, context: int | None = None) -> int:
    """Forward FLOPs per token: 2*m*n per matrix product plus attention terms at ``context``."""
    cfg = model.config
    d, dh = cfg.d_model, cfg.d_head
    ctx = cfg.max_seq_len if context is None else context
    total = 2 * d * cfg.vocab_size
    for h, f in layer_widths(model, shape):
        total += layer_flops(d, dh, h, f, ctx)
    return total


def layer_flops(d: int, dh: int, heads: int, ffn: int, ctx: int) -> int:
    proj = 2 * (4 * d * heads * dh + 3 * d * ffn)
    attn = 2 * 2 * ctx * heads * dh  # scores and context
    return proj + attn


def measure_latency(dense, tokens: np.ndarray, runs: int = 20, warmup: int = 3) -> float:
    """Median wall-clock milliseconds of ``dense.forward(tokens)``."""

    def _time():
        for _ in range(warmup):
            dense.forward(tokens)
        samples = []
        for _ in range(runs):
            t0 = time.perf_counter()
            dense.forward(tokens)
            samples.append((time.perf_counter() - t0) * 1e3)
        return statistics.median(samples)

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            return _time()
    return _time()


@dataclass
class ProfileRow:
    shape_id: str
    depth: int
    width_ratio: float
    params: int
    flops_per_token: int
    latency_ms_p50: float | None


def profile(
    model: ElasticModel,
    grid: ShapeGrid,
    shapes: dict[tuple[int, int], SubnetShape],
    *,
    runs: int = 20,
    warmup: int = 3,
    seq_len: int | None = None,
    measure: bool = True,
) -> list[ProfileRow]:
    tokens = np.zeros((1, seq_len or model.config.max_seq_len), dtype=np.int64)
    rows = []
    for key in grid.keys:
        shape = shapes[key]
        try:
            dense = extract(model, shape, grid)
        except Exception as exc:
            raise RuntimeError(f"profile: extraction of shape {key} failed: {exc}") from exc
        lat = measure_latency(dense, tokens, runs, warmup) if measure else None
        d, w = key
        rows.append(
            ProfileRow(
                shape_id=f"d{grid.depths[d]}-w{grid.ratios[w]:.3f}",
                depth=grid.depths[d],
                width_ratio=grid.ratios[w],
                params=count_params(model, shape),
                flops_per_token=count_flops(model, shape),
                latency_ms_p50=lat,
            )
        )
    return rows


def profile_csv(rows: list[ProfileRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shape_id", "depth", "width_ratio", "params", "flops_per_token", "latency_ms_p50"])
    for r in sorted(rows, key=lambda r: (r.params, r.flops_per_token, r.shape_id)):
        lat = "" if r.latency_ms_p50 is None else f"{r.latency_ms_p50:.4f}"
        w.writerow([r.shape_id, r.depth, f"{r.width_ratio:.6g}", r.params, r.flops_per_token, lat])
    return buf.getvalue()


# -- search ---------------------------------------------------------------------------

CONSTRAINTS = ("max-params", "max-flops", "max-latency-ms")


@dataclass
class SearchSpec:
    constraint: str
    budget: float
    depth_stride: int = 2
    width_stride: int = 2
    radius: int = 1

    def __post_init__(self):
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if self.depth_stride < 1 or self.width_stride < 1 or self.radius < 0:
            raise ValueError("strides must be >= 1 and radius >= 0")


@dataclass
class SearchResult:
    feasible: bool
    shape: tuple[int, int]
    score: float | None
    cost: float
    budget: float
    constraint: str
    stage1: list[dict] = field(default_factory=list)
    stage2: list[dict] = field(default_factory=list)
    stage1_best: tuple[int, int] | None = None

    @property
    def slack(self) -> float:
        return self.budget - self.cost

    def to_json(self, grid: ShapeGrid | None = None) -> str:
        d = {
            "feasible": self.feasible,
            "shape": list(self.shape),
            "score": self.score,
            "cost": self.cost,
            "budget": self.budget,
            "constraint": self.constraint,
            "constraint_slack": self.slack,
            "stage1_best": None if self.stage1_best is None else list(self.stage1_best),
            "stage1": self.stage1,
            "stage2": self.stage2,
        }
        if grid is not None:
            d["depth"] = grid.depths[self.shape[0]]
            d["width_ratio"] = grid.ratios[self.shape[1]]
        return json.dumps(d, indent=1, sort_keys=True)


def coarse_keys(grid: ShapeGrid, spec: SearchSpec) -> list[tuple[int, int]]:
    """Strided sub-grid anchored at the deepest depth and the full width."""
    ds = list(range(len(grid.depths) - 1, -1, -spec.depth_stride))
    ws = list(range(0, len(grid.ratios), spec.width_stride))
    return sorted((d, w) for d in ds for w in ws)


def _best(entries: list[dict], params_of) -> dict | None:
    feas = [e for e in entries if e["feasible"]]
    if not feas:
        return None
    # highest score, then fewer params, then grid order
    return min(feas, key=lambda e: (-e["score"], params_of(tuple(e["shape"])), tuple(e["shape"])))


def search(spec: SearchSpec, grid: ShapeGrid, evaluate, cost, params_of) -> SearchResult:
    """Coarse strided grid, then every grid shape within ``radius`` of the coarse winner.

    ``evaluate(key)`` returns the calibration score (larger is better),
    ``cost(key)`` the constrained quantity, ``params_of(key)`` the parameter
    count used for tie-breaking. When no coarse shape fits the budget the
    neighbourhood of the cheapest coarse shape is searched instead, and if that
    fails too every feasible grid shape is scored.
    """
    costs = {k: float(cost(k)) for k in grid.keys}
    feasible = [k for k in grid.keys if costs[k] <= spec.budget]
    if not feasible:
        tight = min(grid.keys, key=lambda k: (costs[k], k))
        return SearchResult(False, tight, None, costs[tight], spec.budget, spec.constraint)
    scores: dict = {}

    def entry(key):
        ok = costs[key] <= spec.budget
        if ok and key not in scores:
            scores[key] = float(evaluate(key))
        return {"shape": list(key), "cost": costs[key], "feasible": ok, "score": scores.get(key)}

    coarse = coarse_keys(grid, spec)
    stage1 = [entry(k) for k in coarse]
    best1 = _best(stage1, params_of)
    center = tuple(best1["shape"]) if best1 else min(coarse, key=lambda k: (costs[k], k))
    near = [k for k in grid.keys if max(abs(k[0] - center[0]), abs(k[1] - center[1])) <= spec.radius]
    stage2 = [entry(k) for k in near]
    if _best(stage2, params_of) is None:
        stage2 += [entry(k) for k in feasible if k not in near]
    best2 = _best(stage2, params_of)
    return SearchResult(
        True,
        tuple(best2["shape"]),
        best2["score"],
        best2["cost"],
        spec.budget,
        spec.constraint,
        stage1,
        stage2,
        None if best1 is None else tuple(best1["shape"]),
    )

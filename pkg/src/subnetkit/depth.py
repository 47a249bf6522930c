"""Dynamic-programming layer selection.

``D[n][m]`` holds the best calibration score reachable by removing exactly
``m`` of the first ``n`` layers and ``S[n][m]`` the retention mask achieving
it. Each cell either inherits ``D[n-1][m]`` (keep layer n) or evaluates the
mask ``S[n-1][m-1]`` with layer n removed. Scores are oriented so that larger
is better.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

Mask = tuple[int, ...]

KEEP, REMOVE = "keep", "remove"


class DPError(RuntimeError):
    pass


def remove(mask: Mask, n: int) -> Mask:
    """Clear the (1-based) n-th layer bit."""
    if not 1 <= n <= len(mask):
        raise IndexError(f"layer {n} outside mask of length {len(mask)}")
    if not mask[n - 1]:
        raise ValueError(f"layer {n} already removed in {mask_str(mask)}")
    return mask[: n - 1] + (0,) + mask[n:]


def mask_str(mask) -> str:
    return "".join(str(int(b)) for b in mask)


@dataclass
class DPTable:
    n_layers: int
    max_remove: int
    D: list[list[float]]
    S: list[list[Mask | None]]
    branch: list[list[str | None]]
    metric: str = "custom"
    fingerprint: str = ""
    full_score: float | None = None

    def select(self, m: int) -> Mask:
        """Retention mask for removing ``m`` layers from the whole model."""
        if not 0 <= m <= self.max_remove:
            raise ValueError(f"m={m} outside [0, {self.max_remove}]")
        return self.S[self.n_layers][m]

    def to_json(self) -> str:
        def enc(v):
            if v == math.inf:
                return "inf"
            if v == -math.inf:
                return "-inf"
            return v

        d = {
            "version": 1,
            "n_layers": self.n_layers,
            "max_remove": self.max_remove,
            "metric": self.metric,
            "fingerprint": self.fingerprint,
            "full_score": self.full_score,
            "D": [[enc(v) for v in row] for row in self.D],
            "S": [[None if s is None else mask_str(s) for s in row] for row in self.S],
            "branch": self.branch,
        }
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, expect_fingerprint: str | None = None) -> "DPTable":
        d = json.loads(text)
        if expect_fingerprint is not None and d["fingerprint"] != expect_fingerprint:
            raise DPError(
                f"DP table fingerprint {d['fingerprint']} does not match evaluator {expect_fingerprint}"
            )

        def dec(v):
            return {"inf": math.inf, "-inf": -math.inf}.get(v, v) if isinstance(v, str) else v

        return cls(
            n_layers=d["n_layers"],
            max_remove=d["max_remove"],
            D=[[float(dec(v)) for v in row] for row in d["D"]],
            S=[[None if s is None else tuple(int(c) for c in s) for s in row] for row in d["S"]],
            branch=d["branch"],
            metric=d["metric"],
            fingerprint=d["fingerprint"],
            full_score=d.get("full_score"),
        )


def compute_p(table: DPTable, evaluate: Callable[[Mask], float], n: int, m: int) -> tuple[float, Mask]:
    """Score of removing layer n on top of ``S[n-1][m-1]``."""
    base = table.S[n - 1][m - 1]
    if base is None:
        raise DPError(f"cell S[{n - 1}][{m - 1}] is not filled")
    cand = remove(base, n)
    try:
        return float(evaluate(cand)), cand
    except Exception as exc:  # annotate with the cell being filled
        raise DPError(f"evaluator failed at cell ({n}, {m}) on mask {mask_str(cand)}: {exc}") from exc


def build_dp(
    evaluate: Callable[[Mask], float],
    n_layers: int,
    max_remove: int,
    *,
    metric: str = "custom",
    fingerprint: str = "",
    reference: bool = True,
) -> DPTable:
    """Fill D and S for every removal budget up to ``max_remove``.

    Ties prefer keeping layer n. Infeasible cells (m > n) stay at -inf.
    """
    N, M = n_layers, max_remove
    if not 1 <= M < N:
        raise ValueError(f"need 1 <= M < N, got M={M}, N={N}")
    full: Mask = (1,) * N
    D = [[-math.inf] * (M + 1) for _ in range(N + 1)]
    S: list[list[Mask | None]] = [[None] * (M + 1) for _ in range(N + 1)]
    branch: list[list[str | None]] = [[None] * (M + 1) for _ in range(N + 1)]
    for i in range(N + 1):
        D[i][0] = math.inf
        S[i][0] = full
    table = DPTable(N, M, D, S, branch, metric, fingerprint)
    if reference:
        table.full_score = float(evaluate(full))
    for n in range(1, N + 1):
        for m in range(1, min(n, M) + 1):
            p, cand = compute_p(table, evaluate, n, m)
            if p > D[n - 1][m]:
                D[n][m], S[n][m], branch[n][m] = p, cand, REMOVE
            else:
                D[n][m], S[n][m], branch[n][m] = D[n - 1][m], S[n - 1][m], KEEP
    return table


def select_depth(table: DPTable, m: int) -> Mask:
    return table.select(m)


def drop_last(n_layers: int, m: int) -> Mask:
    """Baseline: remove the last m consecutive layers."""
    return (1,) * (n_layers - m) + (0,) * m


def drop_individually_worst(evaluate: Callable[[Mask], float], n_layers: int, m: int) -> Mask:
    """Baseline: remove the m layers whose single removal hurts least."""
    full = (1,) * n_layers
    single = [(-float(evaluate(remove(full, n))), n) for n in range(1, n_layers + 1)]
    chosen = sorted(single)[:m]
    mask = full
    for _, n in chosen:
        mask = remove(mask, n)
    return mask

"""Closed-form attention cost of a FINE block and instrumented MAC counts.

Accounting convention: every matrix product contributes ``m * k * n``
multiply-accumulates. Counts are split by stage (``w_msa``, ``g_msa``,
``global_msa``) and by kind: ``proj`` (Q/K/V and output projections),
``attn`` (QK^T and the attention-weighted sum of values) and ``mlp``.
The closed form is linear in the number of tokens, so it is compared with
the ``proj`` counts; ``attn`` counts are reported alongside.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attention import FineBlock, FineBlockConfig
from .tensor import ContractError, MacCounter, Tensor

STAGES = ("w_msa", "g_msa", "global_msa")
CONVENTION = ("MAC = m*k*n per matmul; analytic compared against proj "
              "(QKV+output projection) MACs; attn = QK^T + AV MACs")


@dataclass(frozen=True)
class CostParams:
    N: int
    N_u: int
    N_v: int = 1
    N_w: int = 1
    N_wcap: int = 1
    M: int = 1
    c: int = 16


def analytic_terms(p: CostParams, max_intersections: int = 8) -> dict[str, int]:
    """The three addends of ``2c(N(N_u + 2N_v) + N_wcap + M*N_w)(2c + 1)``.

    ``max_intersections`` is 8 for a full 3-D grid and 4 when the grid is
    collapsed along z.
    """
    for name in ("N", "N_u", "N_v", "N_w", "N_wcap", "M", "c"):
        if getattr(p, name) < 1:
            raise ContractError(f"{name} must be >= 1, got {getattr(p, name)}")
    if p.N_wcap > min(max_intersections, p.M):
        raise ContractError(
            f"N_wcap={p.N_wcap} exceeds the intersection bound min({max_intersections}, M={p.M})")
    k = 2 * p.c * (2 * p.c + 1)
    return {
        "w_msa": k * p.N * (p.N_u + p.N_v),
        "g_msa": k * (p.N * p.N_v + p.N_wcap),
        "global_msa": k * p.M * p.N_w,
    }


def analytic_cost(p: CostParams, max_intersections: int = 8) -> int:
    return sum(analytic_terms(p, max_intersections).values())


@dataclass
class FlopReport:
    params: CostParams
    measured: dict = field(default_factory=dict)
    analytic: dict = field(default_factory=dict)

    @property
    def analytic_total(self) -> int:
        return sum(self.analytic.values())

    def measured_total(self, kind: str | None = None, stage: str | None = None) -> int:
        return sum(v for (s, k), v in self.measured.items()
                   if (kind is None or k == kind) and (stage is None or s == stage))

    def ratio(self, stage: str | None = None) -> float:
        """Measured projection MACs over the closed form (per stage or in total)."""
        an = self.analytic_total if stage is None else self.analytic[stage]
        return self.measured_total("proj", stage) / an

    def rows(self) -> list[dict]:
        out = []
        for s in STAGES:
            out.append({
                "stage": s,
                "measured_proj": self.measured_total("proj", s),
                "measured_attn": self.measured_total("attn", s),
                "measured_mlp": self.measured_total("mlp", s),
                "analytic": self.analytic.get(s, 0),
                "ratio": self.ratio(s) if self.analytic.get(s) else float("nan"),
            })
        out.append({
            "stage": "total",
            "measured_proj": self.measured_total("proj"),
            "measured_attn": self.measured_total("attn"),
            "measured_mlp": self.measured_total("mlp"),
            "analytic": self.analytic_total,
            "ratio": self.ratio(),
        })
        return out

    def to_text(self) -> str:
        p = self.params
        lines = [
            f"# convention: {CONVENTION}",
            f"# N={p.N} N_u={p.N_u} N_v={p.N_v} N_w={p.N_w} N_wcap={p.N_wcap} M={p.M} c={p.c}",
            f"{'stage':<12}{'proj':>14}{'attn':>14}{'mlp':>14}{'analytic':>14}{'ratio':>10}",
        ]
        for r in self.rows():
            lines.append(f"{r['stage']:<12}{r['measured_proj']:>14d}{r['measured_attn']:>14d}"
                         f"{r['measured_mlp']:>14d}{r['analytic']:>14d}{r['ratio']:>10.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["stage", "measured_proj", "measured_attn", "measured_mlp", "analytic", "ratio"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            r = dict(r)
            r["ratio"] = f"{r['ratio']:.6f}"
            w.writerow(r)
        return buf.getvalue()


def measure_block(p: CostParams, heads: int = 1, ablation: str = "none", seed: int = 0) -> dict:
    """Run one FINE block on random tokens and return ``{(stage, kind): MACs}``."""
    rng = np.random.default_rng(seed)
    cfg = FineBlockConfig(p.c, heads, p.N_v, p.N_w)
    block = FineBlock(cfg, (p.N_u, 1, 1), rng, ablation)
    u = Tensor(rng.normal(size=(p.N, p.N_u, p.c)))
    v = Tensor(rng.normal(size=(p.N, p.N_v, p.c))) if ablation != "no-memory" else None
    bank = Tensor(rng.normal(size=(p.M * p.N_w, p.c)))
    rows = np.arange(p.N_wcap * p.N_w)
    with MacCounter() as counter:
        block(u, v, bank, rows, None)
    return dict(counter.counts)


def measured_cost(p: CostParams, heads: int = 1, max_intersections: int = 8) -> FlopReport:
    return FlopReport(p, measure_block(p, heads), analytic_terms(p, max_intersections))


def max_intersections(grid, crop_size) -> int:
    """Largest number of cells any crop position touches (exact, per-axis)."""
    best = 1
    for axis in range(2):
        S, P, V = grid.cell_size[axis], crop_size[axis], grid.volume_dims[axis]
        o = np.arange(0, V - P + 1)
        spans = (o + P - 1) // S - o // S + 1
        best *= int(spans.max())
    return best

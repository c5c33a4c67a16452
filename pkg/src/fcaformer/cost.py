"""Closed-form parameter and MAC accounting.

Nothing here touches tensors: every count is written out from layer shapes so
it can be checked against parameter enumeration and against MACs reported by
instrumented kernels. One MAC is one multiply plus one add. Layernorm costs 2
per element; softmax, GELU and scale-factor multiplies cost 1 per element and
land in the ``other`` line; bias adds, residual adds and pooling are free.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

from .models import ModelConfig, default_heads

BLOCK_ITEMS = (
    "norms", "qkv_proj", "attn_matmul", "out_proj", "ffn", "other",
    "attn_bias", "lsf", "tme_merge", "tme_enhance",
)


@dataclass
class LineItem:
    params: int = 0
    macs: int = 0


class CostReport:
    def __init__(self):
        self.items: dict[str, LineItem] = {}

    def add(self, name: str, params: int = 0, macs: int = 0) -> None:
        item = self.items.setdefault(name, LineItem())
        item.params += int(params)
        item.macs += int(macs)

    def merge(self, other: "CostReport") -> "CostReport":
        for name, item in other.items.items():
            self.add(name, item.params, item.macs)
        return self

    def __getitem__(self, name: str) -> LineItem:
        return self.items.get(name, LineItem())

    @property
    def total_params(self) -> int:
        return sum(i.params for i in self.items.values())

    @property
    def total_macs(self) -> int:
        return sum(i.macs for i in self.items.values())

    def share_params(self, name: str) -> float:
        total = self.total_params
        return 100.0 * self[name].params / total if total else 0.0

    def share_macs(self, name: str) -> float:
        total = self.total_macs
        return 100.0 * self[name].macs / total if total else 0.0

    def rows(self, flops: bool = False) -> list[tuple[str, int, int, float, float]]:
        k = 2 if flops else 1
        return [
            (name, item.params, k * item.macs, self.share_params(name), self.share_macs(name))
            for name, item in self.items.items()
        ]

    def to_csv(self, flops: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["component", "params", "flops" if flops else "macs", "share_params", "share_macs"])
        for name, params, macs, sp, sm in self.rows(flops):
            writer.writerow([name, params, macs, repr(sp), repr(sm)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        k = 2 if header[2] == "flops" else 1
        report = cls()
        for row in reader:
            report.add(row[0], int(row[1]), int(row[2]) // k)
        return report

    def to_table(self, flops: bool = False) -> str:
        unit = "FLOPs" if flops else "MACs"
        lines = [f"{'component':<14}{'params':>14}{unit:>18}{'%params':>10}{'%' + unit:>10}"]
        for name, params, macs, sp, sm in self.rows(flops):
            lines.append(f"{name:<14}{params:>14,}{macs:>18,}{sp:>10.2f}{sm:>10.2f}")
        k = 2 if flops else 1
        lines.append(f"{'total':<14}{self.total_params:>14,}{k * self.total_macs:>18,}{100.0:>10.2f}{100.0:>10.2f}")
        return "\n".join(lines)


def _square_grid(n: int) -> tuple[int, int]:
    r = math.isqrt(n)
    return (r, r) if r * r == n else (1, n)


def merged_side(side: int, kernel: int = 7, stride: int = 4) -> int:
    return (side + 2 * (kernel // 2) - kernel) // stride + 1


def cross_token_count(grid_h: int, grid_w: int, stride: int, block_index: int,
                      policy: str = "all_previous") -> int:
    """Cross tokens seen by block ``block_index`` (1-based) of a stage."""
    if block_index < 1:
        raise ValueError("block index starts at 1")
    per_source = -(-grid_h // stride) * -(-grid_w // stride)
    if policy == "all_previous":
        sources = block_index - 1
    elif policy == "skip_last":
        sources = max(block_index - 2, 0)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return sources * per_source


def block_cost(n: int, d: int, m: int = 0, ffn_ratio: int = 4, tme: bool = False, *,
               heads: Optional[int] = None, grid: Optional[tuple[int, int]] = None,
               use_cross: Optional[bool] = None, use_lsf: Optional[bool] = None,
               learnable_merge: Optional[bool] = None, lsf_per_source: bool = False,
               max_depth_offset: int = 12, qkv_bias: bool = False,
               merge_kernel: int = 7, merge_stride: int = 4, enhance_kernel: int = 3) -> CostReport:
    """Parameters and MACs of one FcaFormer block with ``n`` regular and ``m`` cross tokens.

    ``tme`` switches the learnable merge and enhance branches. Cross tokens are
    assumed on when ``tme`` is set or ``m > 0``; without ``tme`` they are
    pooled by a frozen kernel (MACs, no parameters).
    """
    if n < 1 or d < 1 or m < 0:
        raise ValueError("need n, d >= 1 and m >= 0")
    heads = default_heads(d) if heads is None else heads
    gh, gw = _square_grid(n) if grid is None else grid
    use_cross = (tme or m > 0) if use_cross is None else use_cross
    use_lsf = use_cross if use_lsf is None else use_lsf
    learnable_merge = tme if learnable_merge is None else learnable_merge
    r = ffn_ratio
    rep = CostReport()
    rep.add("norms", params=4 * d, macs=2 * n * d + 2 * m * d + 2 * n * d)
    rep.add("qkv_proj", params=3 * d * d + (3 * d if qkv_bias else 0), macs=n * d * d + 2 * (n + m) * d * d)
    rep.add("attn_matmul", macs=2 * n * (n + m) * d)
    rep.add("out_proj", params=d * d + (d if qkv_bias else 0), macs=n * d * d)
    rep.add("ffn", params=2 * r * d * d + r * d + d, macs=2 * r * n * d * d)
    other = heads * n * (n + m) + r * n * d
    if use_lsf and m > 0:
        other += m * d
    rep.add("other", macs=other)
    bias_params = heads * (2 * gh - 1) * (2 * gw - 1)
    if use_cross:
        bias_params += heads * max_depth_offset
    rep.add("attn_bias", params=bias_params)
    if use_lsf:
        rep.add("lsf", params=d * (max_depth_offset if lsf_per_source else 1))
    if use_cross:
        merged = merged_side(gh, merge_kernel, merge_stride) * merged_side(gw, merge_kernel, merge_stride)
        rep.add("tme_merge", params=merge_kernel ** 2 * d if learnable_merge else 0,
                macs=merge_kernel ** 2 * d * merged)
    if tme:
        rep.add("tme_enhance", params=enhance_kernel ** 2 * d, macs=enhance_kernel ** 2 * d * n)
    return rep


def _fca_stage_cost(cfg: ModelConfig, stage: int, cross: bool = True) -> CostReport:
    side = cfg.stage_grids()[stage]
    d = cfg.widths[stage]
    heads = cfg.stage_heads()[stage]
    rep = CostReport()
    use_cross = cfg.use_cross and cross
    for l in range(1, cfg.depths[stage] + 1):
        m = 0
        if use_cross:
            sources = l - 1 if cfg.cross_history == "all_previous" else max(l - 2, 0)
            m = sources * merged_side(side, cfg.merge_kernel, cfg.merge_stride) ** 2
        rep.merge(block_cost(
            side * side, d, m, cfg.ffn_ratio, tme=cfg.use_tme and cross, heads=heads,
            grid=(side, side), use_cross=use_cross, use_lsf=cfg.use_lsf and cross,
            learnable_merge=cfg.use_tme, lsf_per_source=cfg.lsf_per_source,
            max_depth_offset=cfg.max_depth_offset(), qkv_bias=cfg.qkv_bias,
            merge_kernel=cfg.merge_kernel, merge_stride=cfg.merge_stride,
            enhance_kernel=cfg.enhance_kernel,
        ))
    return rep


def convnext_block_cost(c: int, side: int) -> CostReport:
    rep = CostReport()
    rep.add("convnext", params=8 * c * c + 58 * c, macs=side * side * (8 * c * c + 56 * c))
    return rep


def model_cost(cfg: ModelConfig, input_size: Optional[int] = None) -> CostReport:
    if input_size is not None and input_size != cfg.input_size:
        cfg = cfg.replace(input_size=input_size)
    rep = CostReport()
    grids = cfg.stage_grids()
    if cfg.kind == "plain":
        d, p = cfg.widths[0], cfg.patch_size
        rep.add("patch_embed", params=3 * p * p * d + d, macs=d * 3 * p * p * grids[0] ** 2)
    else:
        d1 = cfg.widths[0]
        rep.add("stem", params=3 * 16 * d1 + d1 + 2 * d1,
                macs=d1 * 3 * 16 * grids[0] ** 2 + 2 * d1 * grids[0] ** 2)
    for i in range(len(cfg.widths)):
        if i in cfg.fca_stages():
            rep.merge(_fca_stage_cost(cfg, i))
        else:
            for _ in range(cfg.depths[i]):
                rep.merge(convnext_block_cost(cfg.widths[i], grids[i]))
        if cfg.kind == "hybrid" and i < 3:
            ci, co, s = cfg.widths[i], cfg.widths[i + 1], grids[i]
            rep.add("downsample", params=2 * ci + ci * co + co + 9 * co + co,
                    macs=2 * ci * s * s + ci * co * s * s + 9 * co * (s // 2) ** 2)
    d, k = cfg.widths[-1], cfg.num_classes
    rep.add("head", params=2 * d + d * k + k, macs=2 * d + d * k)
    return rep


def fca_overhead(cfg: ModelConfig) -> float:
    """Relative MAC increase of the FcaFormer stages over the same blocks without cross tokens or TME."""
    with_fca = sum(_fca_stage_cost(cfg, i).total_macs for i in cfg.fca_stages())
    plain = sum(_fca_stage_cost(cfg, i, cross=False).total_macs for i in cfg.fca_stages())
    if plain == 0:
        return 0.0
    return with_fca / plain - 1.0

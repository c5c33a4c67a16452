"""Attention inspection: cross-token attention mass and per-weight dumps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..core import Tensor, no_grad
from ..models import FcaFormer, FcaStage

DUMP_HEADER = ["stage", "block", "head", "query_index", "column_index", "column_kind", "source_depth", "weight"]


@dataclass
class BlockMass:
    stage: int
    block: int
    n: int
    m: int
    cross_mass: float

    @property
    def regular_mass(self) -> float:
        return 1.0 - self.cross_mass


def _trace(model: FcaFormer, images: Tensor) -> dict:
    trace: dict = {}
    with no_grad():
        model(images, trace=trace)
    return trace


def attn_mass(model: FcaFormer, images: Tensor) -> list[BlockMass]:
    """Share of attention falling on cross columns, averaged over batch, heads and queries."""
    out = []
    for stage, records in sorted(_trace(model, images).items()):
        side = model.cfg.stage_grids()[stage]
        n = side * side
        for l, (attn, keys) in enumerate(records, start=1):
            m = keys - n
            mass = float(attn.data[..., n:].sum(axis=-1).mean()) if m > 0 else 0.0
            out.append(BlockMass(stage + 1, l, n, m, mass))
    return out


def mass_to_csv(rows: list[BlockMass]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "block", "n", "m", "cross_mass", "regular_mass"])
    for r in rows:
        w.writerow([r.stage, r.block, r.n, r.m, repr(r.cross_mass), repr(r.regular_mass)])
    return buf.getvalue()


def mass_from_csv(text: str) -> list[BlockMass]:
    return [BlockMass(int(r["stage"]), int(r["block"]), int(r["n"]), int(r["m"]), float(r["cross_mass"]))
            for r in csv.DictReader(io.StringIO(text))]


def mean_cross_mass(rows: list[BlockMass]) -> float:
    """Average over blocks that actually see cross tokens (0 if none do)."""
    vals = [r.cross_mass for r in rows if r.m > 0]
    return float(np.mean(vals)) if vals else 0.0


def column_sources(model: FcaFormer, stage: int, block: int) -> list[tuple[str, int]]:
    """``(kind, source_depth)`` for every key column of ``block`` (1-based) in ``stage`` (0-based).

    Regular columns carry source depth ``block - 1`` (the tokens entering the block).
    """
    cfg = model.cfg
    side = cfg.stage_grids()[stage]
    cols = [("regular", block - 1)] * (side * side)
    st = model.stages[stage]
    if not isinstance(st, FcaStage) or not cfg.use_cross:
        return cols
    per = cfg.options().tme.merged_side(side) ** 2
    limit = block - 1 if cfg.cross_history == "all_previous" else block - 2
    for src in range(limit, 0, -1):
        cols.extend([("cross", src)] * per)
    return cols


def attn_dump_rows(model: FcaFormer, image: np.ndarray) -> list[list]:
    """Every attention weight of every FcaFormer block for a single image ``[3, H, W]``."""
    if image.ndim == 3:
        image = image[None]
    rows = []
    trace = _trace(model, Tensor(image.astype(model.cfg.np_dtype)))
    for stage, records in sorted(trace.items()):
        for l, (attn, _) in enumerate(records, start=1):
            sources = column_sources(model, stage, l)
            weights = attn.data[0]
            heads, n, keys = weights.shape
            for h in range(heads):
                for q in range(n):
                    for c in range(keys):
                        kind, src = sources[c]
                        rows.append([stage + 1, l, h, q, c, kind, src, float(weights[h, q, c])])
    return rows


def dump_to_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DUMP_HEADER)
    for r in rows:
        w.writerow(r[:7] + [repr(r[7])])
    return buf.getvalue()


def dump_from_csv(text: str) -> list[list]:
    reader = csv.reader(io.StringIO(text))
    next(reader)
    return [[int(r[0]), int(r[1]), int(r[2]), int(r[3]), int(r[4]), r[5], int(r[6]), float(r[7])]
            for r in reader]

"""Ablation ladder and the scale-factor / convergence comparisons."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from typing import Optional, Sequence

from ..core import Tensor
from ..cost import model_cost
from ..models import ModelConfig, build_model, count_learnable_params
from .data import SynthTask
from .inspect import attn_mass, mean_cross_mass
from .train import History, TrainConfig, train


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale hybrid model for the 32px synthetic task."""
    base = dict(variant="custom", kind="hybrid", widths=(16, 24, 32, 48), depths=(1, 1, 3, 1),
                input_size=32, num_classes=10)
    return ModelConfig(**{**base, **overrides})


@dataclass(frozen=True)
class AblationFlags:
    use_cross: bool
    use_lsf: bool
    use_tme: bool
    label: str = ""

    def __post_init__(self):
        if self.use_lsf and not self.use_cross:
            raise ValueError("use_lsf implies use_cross")

    def apply(self, cfg: ModelConfig) -> ModelConfig:
        return cfg.replace(use_cross=self.use_cross, use_lsf=self.use_lsf, use_tme=self.use_tme)


LADDER = (
    AblationFlags(False, False, False, "baseline (global attention)"),
    AblationFlags(True, False, False, "+naive forward cross attention"),
    AblationFlags(True, True, False, "+learnable scale factors"),
    AblationFlags(True, True, True, "+TME"),
)


@dataclass
class AblationRow:
    label: str
    flags: AblationFlags
    params: int
    macs: int
    train_acc: float
    val_acc: float
    cross_mass: float


def ablation_ladder(base_cfg: ModelConfig, task: SynthTask, train_cfg: TrainConfig,
                    flags: Sequence[AblationFlags] = LADDER) -> list[AblationRow]:
    rows = []
    val = Tensor(task.val.images)
    for f in flags:
        cfg = f.apply(base_cfg)
        model = build_model(cfg)
        hist = train(model, task, train_cfg)
        rows.append(AblationRow(
            f.label, f, count_learnable_params(model), model_cost(cfg).total_macs,
            hist.final.train_acc, hist.final.val_acc, mean_cross_mass(attn_mass(model, val)),
        ))
    return rows


def ladder_table(rows: list[AblationRow]) -> str:
    lines = [f"{'row':<34}{'params':>10}{'MACs':>14}{'train':>8}{'val':>8}{'xmass':>8}"]
    for r in rows:
        lines.append(f"{r.label:<34}{r.params:>10,}{r.macs:>14,}{r.train_acc:>8.3f}{r.val_acc:>8.3f}{r.cross_mass:>8.3f}")
    return "\n".join(lines)


def ladder_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "use_cross", "use_lsf", "use_tme", "params", "macs", "train_acc", "val_acc", "cross_mass"])
    for r in rows:
        w.writerow([r.label, int(r.flags.use_cross), int(r.flags.use_lsf), int(r.flags.use_tme), r.params,
                    r.macs, repr(r.train_acc), repr(r.val_acc), repr(r.cross_mass)])
    return buf.getvalue()


@dataclass
class LsfComparison:
    seed: int
    mass_with_lsf: float
    mass_without_lsf: float

    @property
    def lsf_wins(self) -> bool:
        return self.mass_with_lsf > self.mass_without_lsf


def lsf_effect(base_cfg: ModelConfig, task: SynthTask, train_cfg: TrainConfig,
               seeds: Sequence[int] = (0, 1, 2)) -> list[LsfComparison]:
    """Train seed-paired models with and without scale factors; compare cross-attention mass on val images."""
    val = Tensor(task.val.images)
    out = []
    for seed in seeds:
        masses = []
        for use_lsf in (True, False):
            cfg = base_cfg.replace(use_cross=True, use_lsf=use_lsf, seed=seed)
            model = build_model(cfg)
            train(model, task, TrainConfig(**{**train_cfg.__dict__, "seed": seed}))
            masses.append(mean_cross_mass(attn_mass(model, val)))
        out.append(LsfComparison(seed, *masses))
    return out


def epochs_to_fraction(history: History, fraction: float = 0.95) -> int:
    target = fraction * history.final.train_acc
    for r in history.records:
        if r.train_acc >= target:
            return r.epoch
    return history.final.epoch


@dataclass
class ConvergenceReport:
    epochs_with_fca: list
    epochs_without_fca: list

    @property
    def median_with(self) -> float:
        return statistics.median(self.epochs_with_fca)

    @property
    def median_without(self) -> float:
        return statistics.median(self.epochs_without_fca)

    @property
    def fca_not_slower(self) -> bool:
        return self.median_with <= self.median_without


def convergence_report(base_cfg: ModelConfig, task: SynthTask, train_cfg: TrainConfig,
                       seeds: Sequence[int] = (0, 1, 2, 3, 4), fraction: float = 0.95,
                       ) -> ConvergenceReport:
    """Epochs to reach ``fraction`` of the final train accuracy, with and without forward cross attention."""
    with_fca, without = [], []
    for seed in seeds:
        for flags, sink in ((LADDER[-1], with_fca), (LADDER[0], without)):
            cfg = flags.apply(base_cfg).replace(seed=seed)
            hist = train(build_model(cfg), task, TrainConfig(**{**train_cfg.__dict__, "seed": seed}))
            sink.append(epochs_to_fraction(hist, fraction))
    return ConvergenceReport(with_fca, without)

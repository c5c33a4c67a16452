"""Desk-scale experiments: synthetic data, training, inspection, ablations."""

from .ablation import (
    LADDER,
    AblationFlags,
    AblationRow,
    ConvergenceReport,
    LsfComparison,
    ablation_ladder,
    convergence_report,
    epochs_to_fraction,
    ladder_csv,
    ladder_table,
    lsf_effect,
    tiny_config,
)
from .checks import block_gradcheck
from .data import Split, SynthTask
from .inspect import (
    BlockMass,
    attn_dump_rows,
    attn_mass,
    dump_from_csv,
    dump_to_csv,
    mass_from_csv,
    mass_to_csv,
    mean_cross_mass,
)
from .optim import AdamW, cosine_lr
from .train import EpochRecord, History, TrainConfig, TrainingDiverged, cross_entropy, evaluate, train

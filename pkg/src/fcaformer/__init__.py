"""FcaFormer: forward cross attention for hybrid vision transformers, on a small numpy autodiff core."""

from .attention import (
    AttentionBias,
    CmhaParams,
    CrossTokenSet,
    LsfVector,
    TokenGrid,
    assemble_kv_input,
    build_bias,
    cmha_forward,
)
from .blocks import CrossTokenCache, FcaBlock, FcaOptions, fca_block_forward, stage_forward
from .cost import CostReport, block_cost, cross_token_count, fca_overhead, model_cost
from .models import FcaFormer, ModelConfig, build_model, count_learnable_params
from .tme import TmeConfig, TmeParams, token_enhance, token_merge

__version__ = "0.1.0"

"""Plain and hybrid FcaFormer classifiers."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import TokenGrid
from .blocks import (
    ConvNextBlock,
    Downsample,
    FcaBlock,
    FcaOptions,
    LayerNorm,
    PatchEmbed,
    Stem,
    map_to_tokens,
    stage_forward,
    tokens_to_map,
)
from .core import DTYPES, Module, Tensor, param, philox, trunc_normal
from .core import functional as F
from .tme import TmeConfig

VARIANTS = {
    "L0": dict(kind="plain", widths=(192,), depths=(12,)),
    "L1": dict(kind="hybrid", widths=(64, 128, 192, 320), depths=(2, 2, 6, 2)),
    "L2": dict(kind="hybrid", widths=(96, 192, 320, 480), depths=(2, 2, 7, 2)),
    "L3": dict(kind="hybrid", widths=(96, 192, 320, 512), depths=(3, 6, 12, 3)),
    "L4": dict(kind="hybrid", widths=(128, 256, 512, 768), depths=(3, 6, 12, 3)),
}


def default_heads(d: int) -> int:
    heads = max(1, d // 32)
    while d % heads:
        heads -= 1
    return heads


@dataclass
class ModelConfig:
    variant: str = "custom"
    kind: str = "hybrid"
    widths: tuple = (8, 16, 24, 32)
    depths: tuple = (1, 1, 2, 1)
    heads: Optional[tuple] = None
    ffn_ratio: int = 4
    cross_history: str = "all_previous"
    num_classes: int = 1000
    input_size: int = 224
    seed: int = 0
    patch_size: int = 16
    use_cross: bool = True
    use_lsf: bool = True
    use_tme: bool = True
    lsf_per_source: bool = False
    qkv_bias: bool = False
    tme_residual: bool = True
    merge_kernel: int = 7
    merge_stride: int = 4
    enhance_kernel: int = 3
    dtype: str = "f32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(v) for v in self.depths)
        if self.heads is not None:
            self.heads = tuple(int(h) for h in self.heads)
        self.validate()

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "ModelConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")
        return cls(variant=name, **{**VARIANTS[name], **overrides})

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        variant = raw.get("variant", "custom")
        if variant != "custom":
            raw.pop("variant")
            if raw.get("heads") is None:
                raw.pop("heads", None)
            return cls.from_variant(variant, **raw)
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["widths"] = list(self.widths)
        out["depths"] = list(self.depths)
        out["heads"] = list(self.stage_heads())
        return out

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- derived ----------------------------------------------------------
    def validate(self) -> None:
        if self.kind not in ("plain", "hybrid"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        stages = 1 if self.kind == "plain" else 4
        if len(self.widths) != stages or len(self.depths) != stages:
            raise ValueError(f"{self.kind} model needs {stages} widths and depths")
        if any(w < 1 for w in self.widths) or any(v < 0 for v in self.depths):
            raise ValueError("widths must be positive and depths non-negative")
        div = self.patch_size if self.kind == "plain" else 32
        if self.input_size < div or self.input_size % div:
            raise ValueError(f"input size {self.input_size} must be a positive multiple of {div}")
        if self.heads is not None:
            if len(self.heads) != stages:
                raise ValueError("heads must list one entry per stage")
            for w, h in zip(self.widths, self.heads):
                if h < 1 or w % h:
                    raise ValueError(f"{h} heads do not divide width {w}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.options()

    def stage_heads(self) -> tuple:
        if self.heads is not None:
            return self.heads
        return tuple(default_heads(w) for w in self.widths)

    def fca_stages(self) -> tuple:
        return (0,) if self.kind == "plain" else (2, 3)

    def stage_grids(self) -> tuple:
        """Spatial side of every stage's feature map."""
        if self.kind == "plain":
            return (self.input_size // self.patch_size,)
        s = self.input_size // 4
        return (s, s // 2, s // 4, s // 8)

    def max_depth_offset(self) -> int:
        return max(1, max(self.depths[i] for i in self.fca_stages()))

    def options(self) -> FcaOptions:
        return FcaOptions(
            use_cross=self.use_cross, use_lsf=self.use_lsf, use_tme=self.use_tme,
            lsf_per_source=self.lsf_per_source, qkv_bias=self.qkv_bias,
            cross_history=self.cross_history,
            tme=TmeConfig(self.merge_kernel, self.merge_stride, self.enhance_kernel, self.tme_residual),
        )

    @property
    def np_dtype(self) -> np.dtype:
        return DTYPES[self.dtype]


class ConvStage(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class FcaStage(Module):
    def __init__(self, blocks: list, policy: str):
        self.blocks = blocks
        self.policy = policy

    def __call__(self, x: TokenGrid, trace: Optional[list] = None) -> TokenGrid:
        return stage_forward(x, self.blocks, self.policy, trace)


class Classifier(Module):
    """Token mean-pool, layernorm, linear."""

    def __init__(self, d: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(d, dtype)
        self.w = param(trunc_normal(rng, (num_classes, d), dtype=dtype))
        self.b = param(np.zeros(num_classes, dtype=dtype))

    def __call__(self, tokens: Tensor) -> Tensor:
        return F.linear(self.norm(tokens.mean(axis=-2)), self.w, self.b)


def _fca_stage(cfg: ModelConfig, stage: int, grid: int, seed: int, dtype) -> FcaStage:
    d = cfg.widths[stage]
    heads = cfg.stage_heads()[stage]
    opts = cfg.options()
    blocks = [
        FcaBlock(d, heads, (grid, grid), depth=l, max_depth_offset=cfg.max_depth_offset(),
                 rng=philox(seed, f"stage{stage}.block{l}"), opts=opts,
                 ffn_ratio=cfg.ffn_ratio, dtype=dtype)
        for l in range(1, cfg.depths[stage] + 1)
    ]
    return FcaStage(blocks, cfg.cross_history)


class FcaFormer(Module):
    def __init__(self, cfg: ModelConfig, seed: Optional[int] = None):
        seed = cfg.seed if seed is None else seed
        dt = cfg.np_dtype
        self.cfg = cfg
        grids = cfg.stage_grids()
        if cfg.kind == "plain":
            self.patch_embed = PatchEmbed(cfg.widths[0], cfg.patch_size, philox(seed, "patch"), dtype=dt)
            self.stages = [_fca_stage(cfg, 0, grids[0], seed, dt)]
            self.downsamples = []
        else:
            self.stem = Stem(cfg.widths[0], philox(seed, "stem"), dtype=dt)
            self.stages = []
            for i in range(4):
                if i in cfg.fca_stages():
                    self.stages.append(_fca_stage(cfg, i, grids[i], seed, dt))
                else:
                    self.stages.append(ConvStage([
                        ConvNextBlock(cfg.widths[i], philox(seed, f"stage{i}.block{j}"), dtype=dt)
                        for j in range(1, cfg.depths[i] + 1)
                    ]))
            self.downsamples = [
                Downsample(cfg.widths[i], cfg.widths[i + 1], philox(seed, f"down{i}"), dtype=dt)
                for i in range(3)
            ]
        self.head = Classifier(cfg.widths[-1], cfg.num_classes, philox(seed, "head"), dtype=dt)

    def features(self, images: Tensor, trace: Optional[dict] = None) -> Tensor:
        """Final tokens ``[B, n, d]`` before the classifier head.

        ``trace``, if given, maps FcaFormer stage index to a list receiving
        each block's ``(attn, key_length)``.
        """
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images [B,3,H,W], got {images.shape}")
        if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise ValueError(f"model built for {cfg.input_size}px input, got {images.shape[2:]}")
        if images.dtype != cfg.np_dtype:
            raise TypeError(f"model dtype {cfg.dtype}, images {images.dtype}")

        def record(i):
            if trace is None:
                return None
            return trace.setdefault(i, [])

        if cfg.kind == "plain":
            x = map_to_tokens(self.patch_embed(images))
            return self.stages[0](x, record(0)).tokens
        x = self.stem(images)
        for i, stage in enumerate(self.stages):
            if isinstance(stage, FcaStage):
                x = tokens_to_map(stage(map_to_tokens(x), record(i)))
            else:
                x = stage(x)
            if i < 3:
                x = self.downsamples[i](x)
        return map_to_tokens(x).tokens

    def __call__(self, images: Tensor, trace: Optional[dict] = None) -> Tensor:
        return self.head(self.features(images, trace))


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> FcaFormer:
    return FcaFormer(cfg, seed)


def forward(model: FcaFormer, images: Tensor) -> Tensor:
    return model(images)


def count_learnable_params(model: Module) -> int:
    return model.num_parameters()


CONFIG_ENTRY = "__config__"


def save_model(path, model: FcaFormer) -> None:
    """Write parameters plus the JSON model config (as a u8 entry) to a checkpoint container."""
    from .core import save_checkpoint

    state = model.state_dict()
    blob = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    state[CONFIG_ENTRY] = np.frombuffer(blob, dtype=np.uint8)
    save_checkpoint(path, state)


def load_model(path) -> FcaFormer:
    from .core import load_checkpoint

    state = load_checkpoint(path)
    if CONFIG_ENTRY not in state:
        raise ValueError(f"{path}: checkpoint carries no model config")
    cfg = ModelConfig.from_dict(json.loads(state.pop(CONFIG_ENTRY).tobytes().decode()))
    model = build_model(cfg)
    model.load_state_dict(state)
    return model

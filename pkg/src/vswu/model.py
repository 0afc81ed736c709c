"""Full snippet-to-segmentation model assembly.

Component map (used for checkpoint name prefixes and freeze sets):
  a: per-frame CNN backbone
  b: temporal context blender
  c: windowed-attention encoder
  d: cascaded up-sampling decoder
  e: segmentation head
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, BackboneOutput
from .decoder import Decoder, DecoderConfig, SegHead, SegmentationOutput
from .nn import Module, init_parameters
from .swin import SwinConfig, SwinEncoder
from .tcm import TCMConfig, TemporalContextModule, tcm_bypass
from .tensor import Tensor

COMPONENT_ATTRS = {"a": "backbone", "b": "tcm", "c": "encoder",
                   "d": "decoder", "e": "head"}


@dataclass
class ModelConfig:
    h: int = 64
    w: int = 64
    t: int = 5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tcm: TCMConfig = field(default_factory=TCMConfig)
    swin: SwinConfig = field(default_factory=SwinConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self):
        if self.t % 2 == 0 or self.t < 1:
            raise ValueError(f"snippet length must be odd and positive, got {self.t}")
        if self.h % 16 or self.w % 16:
            raise ValueError(f"H and W must be divisible by 16, got {self.h}x{self.w}")
        self.backbone.validate()
        self.swin.validate()
        self.decoder.validate()


@dataclass
class ForwardCache:
    """Intermediates kept for explainability and tests."""
    backbone_outputs: list[BackboneOutput | None]
    blended: Tensor
    tsc: Tensor


class SnippetSegmenter(Module):
    """t grayscale frames in, two-channel center-frame segmentation out."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.center = (cfg.t - 1) // 2
        deep_ch = cfg.backbone.stage_channels[3]
        grid_hw = (cfg.h // 16, cfg.w // 16)

        self.backbone = Backbone(cfg.backbone)
        self.tcm = TemporalContextModule(deep_ch, cfg.t, cfg.tcm) \
            if cfg.tcm.enabled else None
        self.encoder = SwinEncoder(deep_ch, cfg.swin, grid_hw)
        skip_ch = (cfg.backbone.stage_channels[2], cfg.backbone.stage_channels[1],
                   cfg.backbone.stage_channels[0])
        self.decoder = Decoder(self.encoder.map_channels, deep_ch, skip_ch,
                               cfg.decoder)
        self.head = SegHead(cfg.decoder.stage_channels[-1])
        init_parameters(self, seed)

    def named_parameters(self, prefix: str = ""):
        """Component-letter prefixed names: a.stem.w, c.stages.0..., e.conv2.b."""
        for letter, attr in COMPONENT_ATTRS.items():
            module = getattr(self, attr)
            if module is None:
                continue
            sub = f"{prefix}{letter}" if prefix else letter
            yield from module.named_parameters(sub)

    def forward(self, frames: list[Tensor]) -> tuple[SegmentationOutput, ForwardCache]:
        if len(frames) != self.cfg.t:
            raise ValueError(f"expected {self.cfg.t} frames, got {len(frames)}")
        if self.tcm is not None:
            outs: list[BackboneOutput | None] = self.backbone.forward_batch(frames)
            tcm_out = self.tcm.forward([o.deep for o in outs])
        else:
            # bypass: neighbours have no data path, so only the center runs
            outs = [None] * self.cfg.t
            outs[self.center] = self.backbone.forward(frames[self.center])
            tcm_out = tcm_bypass([outs[self.center].deep] * self.cfg.t)
        center_out = outs[self.center]
        grid = self.encoder.forward(tcm_out.blended)
        token_map = self.encoder.to_map(grid)
        seg_in = self.decoder.forward(
            token_map,
            tsc=tcm_out.tsc if self.cfg.decoder.tsc_enabled else None,
            skips=(center_out.s3, center_out.s2, center_out.s1)
            if self.cfg.decoder.skips_enabled else None)
        out = self.head.forward(seg_in)
        return out, ForwardCache(backbone_outputs=outs, blended=tcm_out.blended,
                                 tsc=tcm_out.tsc)

    def predict(self, frames: list[np.ndarray]) -> np.ndarray:
        """Probability maps [2, H, W] for raw numpy frames, no graph."""
        with T.no_grad():
            out, _ = self.forward([Tensor(f) for f in frames])
        return out.probs.data


def bypass_variant(cfg: ModelConfig) -> ModelConfig:
    """Same architecture with the temporal blender ablated."""
    return replace(cfg, tcm=replace(cfg.tcm, enabled=False))

"""Temporal context blending of neighbour-frame features into the center
frame.

Each frame slot pools its feature map into a single channel vector with
softmax attention over spatial positions, transforms that vector through a
bottleneck, adds it back over the slot's embedded map, and a per-slot
scalar gate mixes the result into the center feature.  Gates start at
exactly zero, so an initialized blender is a no-op and cannot degrade the
start of training.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import Tensor


@dataclass
class TCMConfig:
    enabled: bool = True
    reduction: int = 4          # bottleneck ratio in the transform stack
    include_center: bool = True  # center slot contributes a context term
    tied_neighbors: bool = False  # non-center slots share one weight set


@dataclass
class TCMOutput:
    blended: Tensor  # [C, H', W'] center feature with temporal context mixed in
    tsc: Tensor      # copy routed to the decoder as the temporal skip


class SlotWeights(Module):
    """Key + transform stack + gate for one frame slot."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.key = Conv2d(channels, 1, 1)
        self.squeeze = Linear(channels, hidden)
        self.norm = LayerNorm(hidden)
        self.expand = Linear(hidden, channels)
        self.gate = Parameter((1,))  # zero-init: blending off at start

    def transform(self, ctx: Tensor) -> Tensor:
        h = self.squeeze.forward(ctx.reshape(1, -1))
        h = T.relu(self.norm.forward(h))
        return self.expand.forward(h).reshape(-1)


class TemporalContextModule(Module):
    def __init__(self, channels: int, t: int, cfg: TCMConfig | None = None):
        super().__init__()
        if t % 2 == 0:
            raise ValueError(f"snippet length must be odd, got {t}")
        cfg = cfg or TCMConfig()
        self.cfg = cfg
        self.t = t
        self.center = (t - 1) // 2
        self.embed = Conv2d(channels, channels, 1)
        if cfg.tied_neighbors:
            shared = SlotWeights(channels, cfg.reduction)
            self.slots = [SlotWeights(channels, cfg.reduction) if i == self.center
                          else shared for i in range(t)]
        else:
            self.slots = [SlotWeights(channels, cfg.reduction) for i in range(t)]

    def active_slots(self) -> list[int]:
        if self.cfg.include_center:
            return list(range(self.t))
        return [i for i in range(self.t) if i != self.center]

    def _pool(self, x: Tensor, slot: int) -> tuple[Tensor, Tensor]:
        """Embedded map plus its attention-pooled [C] context vector."""
        emb = self.embed.forward(x)
        logits = self.slots[slot].key.forward(x).reshape(1, -1)  # [1, H'W']
        xhat = T.softmax(logits, axis=-1)
        ctx = T.matmul(emb.reshape(emb.shape[0], -1), xhat.reshape(-1, 1))
        return emb, ctx.reshape(-1)

    def global_context(self, x: Tensor, slot: int) -> Tensor:
        """Softmax-attention spatial pooling of an embedded feature map.

        Returns the context as a [C] vector; the attention weights over
        the H'*W' positions sum to one.
        """
        if slot >= self.t:
            raise ValueError(f"slot {slot} out of range for t={self.t}")
        _, ctx = self._pool(x, slot)
        return ctx

    def forward(self, features: list[Tensor]) -> TCMOutput:
        if len(features) != self.t:
            raise ValueError(f"expected {self.t} frame features, got {len(features)}")
        shapes = {f.shape for f in features}
        if len(shapes) > 1:
            raise ValueError(f"frame features must share one shape, got {sorted(shapes)}")
        blended = features[self.center]
        for n in self.active_slots():
            slot = self.slots[n]
            emb, ctx = self._pool(features[n], n)
            g_n = emb + slot.transform(ctx).reshape(-1, 1, 1)
            blended = blended + slot.gate.reshape(()) * g_n
        return TCMOutput(blended=blended, tsc=blended)


def tcm_bypass(features: list[Tensor]) -> TCMOutput:
    """Ablation path: the center feature passes through untouched."""
    if len(features) % 2 == 0:
        raise ValueError(f"snippet length must be odd, got {len(features)}")
    center = features[(len(features) - 1) // 2]
    return TCMOutput(blended=center, tsc=center)

"""Gradient-weighted activation heatmaps at the layer before temporal
blending (the center frame's deep backbone feature)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dataset import Snippet
from .model import SnippetSegmenter
from .tensor import Tensor


def gradcam(model: SnippetSegmenter, snippet: Snippet, target_channel: int) -> np.ndarray:
    """Heatmap [H/16, W/16] in [0, 1] for the requested output channel.

    The target scalar is the mean pre-sigmoid logit of the channel inside
    the predicted positive region (whole map when that region is empty);
    channel weights are the spatial mean of its gradient on the center
    frame's deep feature, and the map is the ReLU of the weighted channel
    sum, min-max normalized (an all-zero map stays zero).
    """
    if target_channel not in (0, 1):
        raise ValueError(f"target_channel must be 0 or 1, got {target_channel}")
    frames = [Tensor(f.image) for f in snippet.frames]
    out, cache = model.forward(frames)
    feat = cache.backbone_outputs[model.center].deep
    feat.retain_grad()

    region = (out.probs.data[target_channel] >= 0.5)
    if not region.any():
        region = np.ones_like(region)
    weights = Tensor((region / region.sum()).astype(out.logits.dtype))
    target = (out.logits[target_channel] * weights).sum()
    T.backward(target)

    grad = feat.grad
    channel_w = grad.mean(axis=(1, 2))
    cam = np.maximum((channel_w[:, None, None] * feat.data).sum(axis=0), 0.0)
    hi, lo = cam.max(), cam.min()
    if hi == 0.0:
        return cam  # all-zero map stays zero
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.ones_like(cam)  # constant positive map: normalization guard

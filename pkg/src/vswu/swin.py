"""Windowed self-attention encoder over tokenized feature maps.

Tokens are non-overlapping patches of the blended feature map, linearly
projected with no positional embedding.  Blocks come in pairs: plain
window attention, then shifted-window attention with a cyclic shift and an
additive mask that keeps tokens from different pre-shift regions apart.
Learned per-head relative position biases are shared across windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor

MASK_NEG = -1e9  # additive surrogate for minus infinity, softmax-safe


@dataclass
class SwinConfig:
    embed_dim: int = 64
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (4, 4)
    window_size: tuple[int, ...] = (4, 4)
    mlp_ratio: int = 4
    patch_size: int = 1
    merge_between_stages: bool | str = "auto"  # auto: merge when token grid >= 8

    def validate(self):
        if any(d % 2 for d in self.depths):
            raise ValueError(f"stage depths must be even (W-MSA/SW-MSA pairs), got {self.depths}")
        if not (len(self.depths) == len(self.heads) == len(self.window_size)):
            raise ValueError("depths, heads and window_size must have equal length")
        dim = self.embed_dim
        for i, h in enumerate(self.heads):
            if dim % h:
                raise ValueError(f"stage {i}: dim {dim} not divisible by heads {h}")
            dim *= 2  # after a potential merge


@dataclass
class TokenGrid:
    tokens: Tensor  # [N, D], row-major over the grid
    gh: int
    gw: int

    def __post_init__(self):
        n, _ = self.tokens.shape
        if n != self.gh * self.gw:
            raise ValueError(f"token count {n} != grid {self.gh}x{self.gw}")


@dataclass
class RelativePositionBias:
    """Learned bias table plus the coordinate-difference index map."""
    table: Parameter                 # [(2M-1)^2, heads]
    index: np.ndarray = field(repr=False)  # [M^2, M^2] rows into the table

    def gather(self) -> Tensor:
        m2 = self.index.shape[0]
        bias = T.take(self.table, self.index.reshape(-1))  # [M^4, heads]
        return T.transpose(bias.reshape(m2, m2, -1), (2, 0, 1))  # [heads, M^2, M^2]


def build_relative_index(m: int) -> np.ndarray:
    """Map token pairs (i, j) in an MxM window to bias-table rows.

    Row is (dy + M - 1) * (2M - 1) + (dx + M - 1) for coordinate difference
    (dy, dx) between tokens i and j.
    """
    ys, xs = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    coords = np.stack([ys.reshape(-1), xs.reshape(-1)], axis=1)  # [M^2, 2]
    delta = coords[:, None, :] - coords[None, :, :] + (m - 1)
    return (delta[:, :, 0] * (2 * m - 1) + delta[:, :, 1]).astype(np.int64)


def window_partition(grid: TokenGrid, m: int) -> Tensor:
    """[N, D] -> [numWin, M^2, D] over non-overlapping MxM windows."""
    gh, gw = grid.gh, grid.gw
    if gh % m or gw % m:
        raise ValueError(f"grid {gh}x{gw} not divisible by window size {m}")
    d = grid.tokens.shape[-1]
    x = grid.tokens.reshape(gh // m, m, gw // m, m, d)
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return x.reshape((gh // m) * (gw // m), m * m, d)


def window_reverse(windows: Tensor, gh: int, gw: int) -> TokenGrid:
    """Exact inverse of :func:`window_partition`."""
    num_win, m2, d = windows.shape
    m = int(math.isqrt(m2))
    x = windows.reshape(gh // m, gw // m, m, m, d)
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return TokenGrid(tokens=x.reshape(gh * gw, d), gh=gh, gw=gw)


def build_shift_mask(gh: int, gw: int, m: int, shift: int) -> np.ndarray:
    """Additive attention mask for shifted windows, [numWin, M^2, M^2].

    Standard 3x3 band construction in post-shift coordinates: tokens from
    different pre-shift regions get MASK_NEG, everything else 0.
    """
    if not (0 < shift < m):
        raise ValueError(f"shift must satisfy 0 < shift < {m}, got {shift}")
    regions = np.zeros((gh, gw), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, gh - m), slice(gh - m, gh - shift), slice(gh - shift, gh)):
        for ws in (slice(0, gw - m), slice(gw - m, gw - shift), slice(gw - shift, gw)):
            regions[hs, ws] = cnt
            cnt += 1
    win = regions.reshape(gh // m, m, gw // m, m).transpose(0, 2, 1, 3)
    win = win.reshape(-1, m * m)  # [numWin, M^2] region label per token
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_NEG, 0.0)


def window_attention(windows: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                     wo: Tensor, bias: RelativePositionBias | None, heads: int,
                     mask: np.ndarray | None = None,
                     bq=None, bk=None, bv=None, bo=None) -> tuple[Tensor, Tensor]:
    """Multi-head attention inside each window.

    ``windows`` is [numWin, M^2, D]; weight matrices are [D, D] applied as
    x @ W.  Returns (output windows, attention probabilities
    [numWin, heads, M^2, M^2]).
    """
    num_win, m2, dim = windows.shape
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    dh = dim // heads
    scale = 1.0 / math.sqrt(dh)

    def split_heads(x):
        return T.transpose(x.reshape(num_win, m2, heads, dh), (0, 2, 1, 3))

    q = T.matmul(windows, wq)
    k = T.matmul(windows, wk)
    v = T.matmul(windows, wv)
    if bq is not None:
        q = q + bq
    if bk is not None:
        k = k + bk
    if bv is not None:
        v = v + bv
    q, k, v = split_heads(q), split_heads(k), split_heads(v)

    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale  # [nW, heads, M^2, M^2]
    if bias is not None:
        logits = logits + bias.gather()
    if mask is not None:
        logits = logits + Tensor(mask[:, None, :, :], dtype=logits.dtype)
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)                                      # [nW, heads, M^2, dh]
    out = T.transpose(out, (0, 2, 1, 3)).reshape(num_win, m2, dim)
    out = T.matmul(out, wo)
    if bo is not None:
        out = out + bo
    return out, attn


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, m: int):
        super().__init__()
        self.heads = heads
        self.m = m
        self.wq = Parameter((dim, dim), init=("trunc_normal", 0.02))
        self.wk = Parameter((dim, dim), init=("trunc_normal", 0.02))
        self.wv = Parameter((dim, dim), init=("trunc_normal", 0.02))
        self.wo = Parameter((dim, dim), init=("trunc_normal", 0.02))
        self.bq = Parameter((dim,))
        self.bk = Parameter((dim,))
        self.bv = Parameter((dim,))
        self.bo = Parameter((dim,))
        self.bias_table = Parameter(((2 * m - 1) ** 2, heads))
        self._index = build_relative_index(m)

    def bias(self) -> RelativePositionBias:
        return RelativePositionBias(table=self.bias_table, index=self._index)

    def forward(self, windows: Tensor, mask=None) -> Tensor:
        out, _ = window_attention(windows, self.wq, self.wk, self.wv, self.wo,
                                  self.bias(), self.heads, mask=mask,
                                  bq=self.bq, bk=self.bk, bv=self.bv, bo=self.bo)
        return out


class Mlp(Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio)
        self.fc2 = Linear(dim * ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(T.gelu(self.fc1.forward(x)))


class SwinBlockPair(Module):
    """One W-MSA block followed by one SW-MSA block, pre-norm residuals."""

    def __init__(self, dim: int, heads: int, m: int, mlp_ratio: int):
        super().__init__()
        self.m = m
        self.shift = m // 2
        self.norm1a = LayerNorm(dim)
        self.attn1 = WindowAttention(dim, heads, m)
        self.norm1b = LayerNorm(dim)
        self.mlp1 = Mlp(dim, mlp_ratio)
        self.norm2a = LayerNorm(dim)
        self.attn2 = WindowAttention(dim, heads, m)
        self.norm2b = LayerNorm(dim)
        self.mlp2 = Mlp(dim, mlp_ratio)

    def _attend(self, grid: TokenGrid, attn: WindowAttention, norm: LayerNorm,
                shifted: bool) -> Tensor:
        gh, gw, d = grid.gh, grid.gw, grid.tokens.shape[-1]
        x = norm.forward(grid.tokens)
        mask = None
        if shifted and self.shift > 0:
            x = T.roll(x.reshape(gh, gw, d), (-self.shift, -self.shift), (0, 1))
            x = x.reshape(gh * gw, d)
            mask = build_shift_mask(gh, gw, self.m, self.shift)
        windows = window_partition(TokenGrid(x, gh, gw), self.m)
        out = attn.forward(windows, mask=mask)
        out = window_reverse(out, gh, gw).tokens
        if shifted and self.shift > 0:
            out = T.roll(out.reshape(gh, gw, d), (self.shift, self.shift), (0, 1))
            out = out.reshape(gh * gw, d)
        return out

    def forward(self, grid: TokenGrid) -> TokenGrid:
        if grid.gh % self.m or grid.gw % self.m:
            raise ValueError(f"grid {grid.gh}x{grid.gw} not divisible by window {self.m}")
        x = grid.tokens
        x = x + self._attend(TokenGrid(x, grid.gh, grid.gw), self.attn1,
                             self.norm1a, shifted=False)
        x = x + self.mlp1.forward(self.norm1b.forward(x))
        x = x + self._attend(TokenGrid(x, grid.gh, grid.gw), self.attn2,
                             self.norm2a, shifted=True)
        x = x + self.mlp2.forward(self.norm2b.forward(x))
        return TokenGrid(tokens=x, gh=grid.gh, gw=grid.gw)


class PatchEmbed(Module):
    """Non-overlapping PxP patches, flattened and linearly projected.

    No positional embedding is added; window attention carries relative
    position information through its bias table.
    """

    def __init__(self, cin: int, patch: int, dim: int):
        super().__init__()
        self.patch = patch
        self.proj = Linear(cin * patch * patch, dim)

    def forward(self, feature: Tensor) -> TokenGrid:
        c, h, w = feature.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"feature {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        x = feature.reshape(c, gh, p, gw, p)
        x = T.transpose(x, (1, 3, 0, 2, 4)).reshape(gh * gw, c * p * p)
        return TokenGrid(tokens=self.proj.forward(x), gh=gh, gw=gw)


class PatchMerging(Module):
    """2x2 token neighbourhoods -> concat(4D) -> LN -> linear to 2D."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        gh, gw = grid.gh, grid.gw
        if gh % 2 or gw % 2:
            raise ValueError(f"patch merging needs an even grid, got {gh}x{gw}")
        d = grid.tokens.shape[-1]
        x = grid.tokens.reshape(gh, gw, d)
        x0 = x[0::2, 0::2]
        x1 = x[1::2, 0::2]
        x2 = x[0::2, 1::2]
        x3 = x[1::2, 1::2]
        merged = T.concat([x0, x1, x2, x3], axis=-1).reshape(gh * gw // 4, 4 * d)
        merged = self.reduce.forward(self.norm.forward(merged))
        return TokenGrid(tokens=merged, gh=gh // 2, gw=gw // 2)


def _depth_to_space(tokens: Tensor, gh: int, gw: int, factor: int):
    """Scatter channel groups to a factor x factor neighbourhood."""
    d = tokens.shape[-1]
    if d % (factor * factor):
        raise ValueError(f"cannot unmerge token dim {d} by factor {factor}")
    dq = d // (factor * factor)
    x = tokens.reshape(gh, gw, factor, factor, dq)  # axes: y, x, dx, dy, dq
    x = T.transpose(x, (0, 3, 1, 2, 4))             # y, dy, x, dx, dq
    gh, gw = gh * factor, gw * factor
    return x.reshape(gh * gw, dq), gh, gw


def unmerge_to_map(grid: TokenGrid, merges: int, patch: int = 1) -> Tensor:
    """Tokens back to a [D', H', W'] map, inverting row-major patching and
    any patch merges (channel groups scatter to 2x2 positions)."""
    tokens, gh, gw = grid.tokens, grid.gh, grid.gw
    for _ in range(merges):
        tokens, gh, gw = _depth_to_space(tokens, gh, gw, 2)
    if patch > 1:
        tokens, gh, gw = _depth_to_space(tokens, gh, gw, patch)
    d = tokens.shape[-1]
    return T.transpose(tokens.reshape(gh, gw, d), (2, 0, 1))


class _Stage(Module):
    def __init__(self, pairs: list[SwinBlockPair]):
        super().__init__()
        self.pairs = pairs

    def forward(self, grid: TokenGrid) -> TokenGrid:
        for pair in self.pairs:
            grid = pair.forward(grid)
        return grid


class SwinEncoder(Module):
    """Patch embedding plus staged W-MSA/SW-MSA block pairs."""

    def __init__(self, cin: int, cfg: SwinConfig, token_grid_hw: tuple[int, int]):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gh = token_grid_hw[0] // cfg.patch_size
        gw = token_grid_hw[1] // cfg.patch_size
        if cfg.merge_between_stages == "auto":
            self.merge_enabled = min(gh, gw) >= 8 and len(cfg.depths) > 1
        else:
            self.merge_enabled = bool(cfg.merge_between_stages) and len(cfg.depths) > 1
        self.patch_embed = PatchEmbed(cin, cfg.patch_size, cfg.embed_dim)
        dim = cfg.embed_dim
        stages, merges = [], []
        for s, depth in enumerate(cfg.depths):
            stages.append(_Stage([SwinBlockPair(dim, cfg.heads[s], cfg.window_size[s],
                                                cfg.mlp_ratio)
                                  for _ in range(depth // 2)]))
            if self.merge_enabled and s < len(cfg.depths) - 1:
                merges.append(PatchMerging(dim))
                dim *= 2
        self.stages = stages
        self.merges = merges
        self.out_dim = dim
        self.n_merges = len(merges)

    def forward(self, feature: Tensor) -> TokenGrid:
        grid = self.patch_embed.forward(feature)
        for s, stage in enumerate(self.stages):
            grid = stage.forward(grid)
            if s < len(self.merges):
                grid = self.merges[s].forward(grid)
        return grid

    def to_map(self, grid: TokenGrid) -> Tensor:
        """Final tokens as a [D', H/16, W/16] feature map."""
        return unmerge_to_map(grid, self.n_merges, self.cfg.patch_size)

    @property
    def map_channels(self) -> int:
        # merging doubles dim, each depth-to-space unmerge divides it by 4
        return self.out_dim // (4 ** self.n_merges) // (self.cfg.patch_size ** 2)
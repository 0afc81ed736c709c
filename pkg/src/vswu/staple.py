"""EM fusion of multi-rater binary masks into a probabilistic consensus.

Each rater r has an unknown sensitivity p_r and specificity q_r.  The
E-step computes the per-voxel consensus probability W from the current
(p, q) and a spatial prior; the M-step re-estimates (p, q) from W.  The
incomplete-data log likelihood is tracked per iteration and is
non-decreasing, the standard EM guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-5
PRIOR_CLAMP = 0.01
INIT_PQ = 0.99


@dataclass
class StapleResult:
    consensus_prob: np.ndarray          # W in [0, 1], shape [H, W]
    fused: np.ndarray                   # W >= 0.5, bool
    sensitivity: np.ndarray             # p_r per rater
    specificity: np.ndarray             # q_r per rater
    iterations: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)


def staple_fuse(stack: np.ndarray, max_iter: int = 100, tol: float = 1e-6,
                prior: np.ndarray | None = None) -> StapleResult:
    """Fuse an [R, H, W] binary rater stack (R >= 2).

    The default prior is the voxelwise mean vote clamped to [0.01, 0.99];
    estimated rater probabilities are clamped to [1e-5, 1 - 1e-5] each
    step.  Iteration stops when max |delta W| < tol.
    """
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise ValueError(f"need an [R>=2, H, W] stack, got shape {stack.shape}")
    vals = np.unique(stack)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"rater decisions must be binary, found values {vals}")

    r, h, w = stack.shape
    d = stack.reshape(r, -1).astype(np.float64)   # [R, N]
    if prior is None:
        prior = d.mean(axis=0)
    else:
        prior = np.asarray(prior, dtype=np.float64).reshape(-1)
        if prior.size != h * w:
            raise ValueError(f"prior size {prior.size} != {h * w} voxels")
    pi = np.clip(prior, PRIOR_CLAMP, 1.0 - PRIOR_CLAMP)

    p = np.full(r, INIT_PQ)
    q = np.full(r, INIT_PQ)
    w_prev = pi.copy()
    trace: list[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        # E-step: posterior of true foreground given rater decisions.
        # Factors are multiplied in sorted order so permuting raters leaves
        # the posterior bit-identical.
        fa = np.sort(np.where(d == 1.0, p[:, None], 1.0 - p[:, None]), axis=0)
        fb = np.sort(np.where(d == 1.0, 1.0 - q[:, None], q[:, None]), axis=0)
        a = pi * np.prod(fa, axis=0)
        b = (1.0 - pi) * np.prod(fb, axis=0)
        w_post = a / (a + b)
        trace.append(float(np.log(a + b).sum()))

        # M-step: rater performance given the posterior
        sum_w = w_post.sum()
        sum_not_w = (1.0 - w_post).sum()
        p = np.clip((d * w_post).sum(axis=1) / sum_w, PROB_CLAMP, 1.0 - PROB_CLAMP)
        q = np.clip(((1.0 - d) * (1.0 - w_post)).sum(axis=1) / sum_not_w,
                    PROB_CLAMP, 1.0 - PROB_CLAMP)

        if np.abs(w_post - w_prev).max() < tol:
            converged = True
            w_prev = w_post
            break
        w_prev = w_post

    w_map = w_prev.reshape(h, w)
    return StapleResult(consensus_prob=w_map, fused=w_map >= 0.5,
                        sensitivity=p, specificity=q,
                        iterations=iterations, converged=converged,
                        objective_trace=trace)

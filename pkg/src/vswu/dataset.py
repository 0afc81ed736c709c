"""Synthetic swallow-like video sequences plus snippet windowing and
paired augmentation.

The generator writes sequences in which a bright ellipse (the "bolus")
travels along a randomized smooth path down a static bright corridor (the
"pharynx"), with per-frame ground-truth masks for both structures.  The
ellipse is absent from a configurable leading fraction of each sequence,
and additive Gaussian noise simulates acquisition noise.  Everything is
deterministic given the seed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as vrng
from .pgm import read_pgm, write_pgm

SNIPPET_LENGTH_GRID = (3, 5, 7, 9, 11, 13)

FRAME_PATTERN = "frame_%05d.pgm"
BOLUS_PATTERN = "bolus_%05d.pgm"
PHARYNX_PATTERN = "pharynx_%05d.pgm"


@dataclass
class SynthConfig:
    num_sequences: int = 14
    frames_per_sequence: int = 20
    h: int = 64
    w: int = 64
    seed: int = 42
    noise_sigma: float = 0.05
    absent_fraction: float = 0.15
    speed: float = 1.0
    background: float = 0.12
    corridor_intensity: float = 0.5
    bolus_intensity: float = 0.92


@dataclass
class Frame:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    index: int


@dataclass
class Snippet:
    frames: list[Frame]
    label: np.ndarray  # [2, H, W] float32 in {0, 1}: (bolus, pharynx)
    sequence: str = ""
    center_index: int = 0

    @property
    def t(self) -> int:
        return len(self.frames)

    @property
    def center(self) -> Frame:
        return self.frames[(len(self.frames) - 1) // 2]


@dataclass
class SequenceEntry:
    name: str
    frames: int
    split: str
    geometry: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    h: int
    w: int
    seed: int
    noise_sigma: float
    sequences: list[SequenceEntry]

    def split(self, tag: str) -> list[SequenceEntry]:
        return [s for s in self.sequences if s.split == tag]


def _corridor_geometry(gen: np.random.Generator, h: int, w: int) -> dict:
    return {
        "center": float(0.5 * w + gen.uniform(-0.08, 0.08) * w),
        "amplitude": float(gen.uniform(0.04, 0.10) * w),
        "phase": float(gen.uniform(0.0, 2.0 * math.pi)),
        "half_width": float(gen.uniform(0.10, 0.14) * w),
    }


def _corridor_mask(geo: dict, h: int, w: int) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    cx = geo["center"] + geo["amplitude"] * np.sin(2.0 * math.pi * ys / h + geo["phase"])
    return (np.abs(xs - cx) <= geo["half_width"])


def _bolus_geometry(gen: np.random.Generator, cfg: SynthConfig, corridor: dict) -> dict:
    return {
        "ra": float(gen.uniform(0.05, 0.09) * cfg.w),   # semi-axis along x
        "rb": float(gen.uniform(0.06, 0.11) * cfg.h),   # semi-axis along y
        "y0": 0.12 * cfg.h,
        "y1": 0.88 * cfg.h,
        "wobble": float(gen.uniform(0.0, 0.03) * cfg.w),
        "wobble_freq": float(gen.uniform(1.0, 2.5)),
        "wobble_phase": float(gen.uniform(0.0, 2.0 * math.pi)),
    }


def bolus_center(geo: dict, corridor: dict, cfg: SynthConfig, u: float) -> tuple[float, float]:
    """Ellipse center at path progress u in [0, 1] (clamped)."""
    u = min(max(u, 0.0), 1.0)
    cy = geo["y0"] + u * (geo["y1"] - geo["y0"])
    cx = (corridor["center"]
          + corridor["amplitude"] * math.sin(2.0 * math.pi * cy / cfg.h + corridor["phase"])
          + geo["wobble"] * math.sin(2.0 * math.pi * geo["wobble_freq"] * u
                                     + geo["wobble_phase"]))
    return cy, cx


def ellipse_mask(cy: float, cx: float, ra: float, rb: float, h: int, w: int) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return ((xs - cx) / ra) ** 2 + ((ys - cy) / rb) ** 2 <= 1.0


def frame_progress(frame: int, n_frames: int, absent: int, speed: float) -> float:
    """Path progress of the bolus at a frame index (negative while absent)."""
    if frame < absent:
        return -1.0
    visible = max(n_frames - absent - 1, 1)
    return min(speed * (frame - absent) / visible, 1.0)


def synth_generate(cfg: SynthConfig, root) -> DatasetManifest:
    """Write a synthetic dataset under ``root`` and return its manifest."""
    if cfg.h % 16 or cfg.w % 16:
        raise ValueError(f"H and W must be divisible by 16, got {cfg.h}x{cfg.w}")
    if cfg.frames_per_sequence < 13:
        raise ValueError("frames_per_sequence must be at least 13")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    n = cfg.num_sequences
    n_train = max(1, min(int(round(0.7 * n)), n - 2)) if n >= 3 else max(1, n - 1)
    n_val = min(max(1, int(round(0.15 * n))), n - n_train) if n > n_train else 0
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)

    sequences = []
    for s in range(n):
        name = f"seq_{s:03d}"
        seq_dir = root / name
        seq_dir.mkdir(exist_ok=True)
        gen = vrng.generator(cfg.seed, "synth", s)
        corridor = _corridor_geometry(gen, cfg.h, cfg.w)
        bolus = _bolus_geometry(gen, cfg, corridor)
        absent = int(cfg.absent_fraction * cfg.frames_per_sequence)
        corridor_m = _corridor_mask(corridor, cfg.h, cfg.w)

        for f in range(cfg.frames_per_sequence):
            img = np.full((cfg.h, cfg.w), cfg.background, dtype=np.float64)
            img[corridor_m] = cfg.corridor_intensity
            u = frame_progress(f, cfg.frames_per_sequence, absent, cfg.speed)
            if u >= 0.0:
                cy, cx = bolus_center(bolus, corridor, cfg, u)
                bolus_m = ellipse_mask(cy, cx, bolus["ra"], bolus["rb"], cfg.h, cfg.w)
            else:
                bolus_m = np.zeros((cfg.h, cfg.w), dtype=bool)
            img[bolus_m] = cfg.bolus_intensity
            if cfg.noise_sigma > 0:
                img = img + gen.normal(0.0, cfg.noise_sigma, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            write_pgm(seq_dir / (FRAME_PATTERN % f), np.rint(img * 255).astype(np.uint8))
            write_pgm(seq_dir / (BOLUS_PATTERN % f), bolus_m.astype(np.uint8) * 255)
            write_pgm(seq_dir / (PHARYNX_PATTERN % f), corridor_m.astype(np.uint8) * 255)

        sequences.append(SequenceEntry(
            name=name, frames=cfg.frames_per_sequence, split=splits[s],
            geometry={"corridor": corridor, "bolus": bolus, "absent_frames": absent,
                      "speed": cfg.speed}))

    manifest = DatasetManifest(root=root, h=cfg.h, w=cfg.w, seed=cfg.seed,
                               noise_sigma=cfg.noise_sigma, sequences=sequences)
    save_manifest(manifest)
    return manifest


def save_manifest(manifest: DatasetManifest) -> None:
    doc = {
        "h": manifest.h,
        "w": manifest.w,
        "seed": manifest.seed,
        "noise_sigma": manifest.noise_sigma,
        "frame_pattern": FRAME_PATTERN,
        "bolus_pattern": BOLUS_PATTERN,
        "pharynx_pattern": PHARYNX_PATTERN,
        "sequences": [
            {"name": s.name, "frames": s.frames, "split": s.split,
             "geometry": s.geometry}
            for s in manifest.sequences
        ],
    }
    with open(manifest.root / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_manifest(root) -> DatasetManifest:
    """Load and validate manifest.json: every referenced file must exist."""
    root = Path(root)
    with open(root / "manifest.json") as fh:
        doc = json.load(fh)
    sequences = []
    for s in doc["sequences"]:
        seq_dir = root / s["name"]
        for f in range(s["frames"]):
            for pattern in (FRAME_PATTERN, BOLUS_PATTERN, PHARYNX_PATTERN):
                p = seq_dir / (pattern % f)
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
        sequences.append(SequenceEntry(name=s["name"], frames=s["frames"],
                                       split=s["split"],
                                       geometry=s.get("geometry", {})))
    return DatasetManifest(root=root, h=doc["h"], w=doc["w"], seed=doc["seed"],
                           noise_sigma=doc.get("noise_sigma", 0.0),
                           sequences=sequences)


def _load_sequence(manifest: DatasetManifest, entry: SequenceEntry):
    seq_dir = manifest.root / entry.name
    frames, labels = [], []
    for f in range(entry.frames):
        img = read_pgm(seq_dir / (FRAME_PATTERN % f)).astype(np.float32) / 255.0
        bol = (read_pgm(seq_dir / (BOLUS_PATTERN % f)) > 127).astype(np.float32)
        pha = (read_pgm(seq_dir / (PHARYNX_PATTERN % f)) > 127).astype(np.float32)
        frames.append(Frame(image=img[None], index=f))
        labels.append(np.stack([bol, pha]))
    return frames, labels


def window_snippets(manifest: DatasetManifest, t: int,
                    splits: tuple[str, ...] | None = None,
                    workers: int = 1) -> list[Snippet]:
    """One center-aligned snippet per frame position, edges replicated.

    The label is the center frame's two-channel ground truth; frames with
    no visible bolus keep an all-zero channel 0.  ``workers`` bounds
    concurrent sequence loading; snippet order is by (sequence, frame)
    regardless.
    """
    if t % 2 == 0:
        raise ValueError(f"snippet length must be odd, got {t}")
    if t not in SNIPPET_LENGTH_GRID:
        warnings.warn(f"snippet length {t} outside the supported grid "
                      f"{SNIPPET_LENGTH_GRID}", stacklevel=2)
    k = (t - 1) // 2
    entries = [e for e in manifest.sequences
               if splits is None or e.split in splits]
    for entry in entries:
        if entry.frames == 0:
            raise ValueError(f"sequence {entry.name} has no frames")
    if workers > 1 and len(entries) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(lambda e: _load_sequence(manifest, e), entries))
    else:
        loaded = [_load_sequence(manifest, e) for e in entries]
    out: list[Snippet] = []
    for entry, (frames, labels) in zip(entries, loaded):
        n = len(frames)
        for c in range(n):
            window = [frames[min(max(c + d, 0), n - 1)] for d in range(-k, k + 1)]
            out.append(Snippet(frames=window, label=labels[c],
                               sequence=entry.name, center_index=c))
    return out


# ---- paired augmentation ---------------------------------------------------


def _rotate(img: np.ndarray, angle_deg: float, nearest: bool) -> np.ndarray:
    """Rotate about the image center; bilinear or nearest, zero fill."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = ys - cy, xs - cx
    # inverse map: output pixel pulls from the source rotated by -angle
    sy = cos * dy + sin * dx + cy
    sx = -sin * dy + cos * dx + cx
    if nearest:
        iy = np.rint(sy).astype(int)
        ix = np.rint(sx).astype(int)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(img)
        out[valid] = img[iy[valid], ix[valid]]
        return out
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = (sy - y0).astype(img.dtype)
    fx = (sx - x0).astype(img.dtype)
    out = np.zeros_like(img)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + oy, x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out[valid] += wgt[valid] * img[yy[valid], xx[valid]]
    return out


def augment(snippet: Snippet, gen: np.random.Generator,
            max_angle: float = 15.0) -> Snippet:
    """Random horizontal flip plus limited rotation, identical across the
    whole snippet and both label channels; masks stay binary."""
    flip = gen.random() < 0.5
    angle = float(gen.uniform(-max_angle, max_angle))

    def tf_image(img2d):
        if flip:
            img2d = img2d[:, ::-1]
        if angle != 0.0:
            img2d = _rotate(np.ascontiguousarray(img2d), angle, nearest=False)
        return np.ascontiguousarray(img2d)

    def tf_mask(mask2d):
        if flip:
            mask2d = mask2d[:, ::-1]
        if angle != 0.0:
            mask2d = _rotate(np.ascontiguousarray(mask2d), angle, nearest=True)
        return np.ascontiguousarray(mask2d)

    frames = [Frame(image=tf_image(f.image[0])[None], index=f.index)
              for f in snippet.frames]
    label = np.stack([tf_mask(snippet.label[0]), tf_mask(snippet.label[1])])
    return Snippet(frames=frames, label=label, sequence=snippet.sequence,
                   center_index=snippet.center_index)


def with_center_noise(snippets: list[Snippet], sigma: float, seed: int) -> list[Snippet]:
    """Degrade only the center frame of each snippet with Gaussian noise.

    Deterministic per (sequence, center index), so the same snippet is
    degraded identically across epochs and runs.
    """
    if sigma <= 0:
        return snippets
    out = []
    for s in snippets:
        gen = vrng.generator(seed, "center-noise", s.sequence, s.center_index)
        k = (s.t - 1) // 2
        frames = list(s.frames)
        img = frames[k].image[0]
        noisy = np.clip(img + gen.normal(0.0, sigma, size=img.shape), 0.0, 1.0)
        frames[k] = Frame(image=noisy.astype(np.float32)[None], index=frames[k].index)
        out.append(Snippet(frames=frames, label=s.label, sequence=s.sequence,
                           center_index=s.center_index))
    return out

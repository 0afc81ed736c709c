"""Training loop, component freezing, and the binary checkpoint format.

Checkpoint layout: magic "VSWU", u32 LE version, u32 LE blob count, then
framed blobs: u16 name length, UTF-8 name, u8 rank, rank x u32 LE dims,
raw float32 LE values.  Model parameters come first (names prefixed by
component letter), then optimizer state under "opt." and RNG state under
"rng.".
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as vrng
from . import tensor as T
from .dataset import Snippet, augment
from .losses import combined_loss
from .metrics import dsc
from .model import COMPONENT_ATTRS, SnippetSegmenter
from .optim import Adam, PlateauScheduler
from .tensor import Tensor

MAGIC = b"VSWU"
VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr0: float = 1e-3
    plateau_epochs: int = 20
    lr_decay: float = 0.8
    plateau_threshold: float = 1e-5
    max_epochs: int = 150
    seed: int = 42
    snippet_t: int = 5
    freeze_set: tuple[str, ...] = ()
    init_from: str | None = None
    augment: bool = True
    stop_at_val_dsc: float | None = None

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not (0 < self.lr_decay < 1):
            raise ValueError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if self.snippet_t % 2 == 0:
            raise ValueError(f"snippet_t must be odd, got {self.snippet_t}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


@dataclass
class Checkpoint:
    version: int
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.opt["epoch"][0]) if "epoch" in self.opt else 0

    @property
    def best_val_loss(self) -> float:
        return float(self.opt["best_val"][0]) if "best_val" in self.opt else float("inf")

    @property
    def seed(self) -> int:
        limbs = self.rng.get("seed")
        if limbs is None:
            return 0
        return sum(int(v) << (16 * i) for i, v in enumerate(limbs))

    def apply(self, model: SnippetSegmenter, prefixes: list[str] | None = None) -> int:
        """Copy stored parameters into the model; returns how many loaded.

        With ``prefixes`` only matching names load (partial warm start);
        requesting a prefix with no stored blobs is an error, as is any
        shape conflict.  A full load requires every model parameter.
        """
        loaded = 0
        if prefixes is not None:
            for pre in prefixes:
                if not any(n.startswith(pre) for n in self.params):
                    raise KeyError(f"checkpoint has no parameters with prefix {pre!r}")
        for name, p in model.named_parameters():
            if prefixes is not None and not any(name.startswith(pre) for pre in prefixes):
                continue
            if name not in self.params:
                if prefixes is None:
                    raise KeyError(f"checkpoint is missing parameter {name!r}")
                continue
            blob = self.params[name]
            if tuple(blob.shape) != tuple(p.shape):
                raise ValueError(f"shape conflict for {name!r}: checkpoint "
                                 f"{blob.shape} vs model {tuple(p.shape)}")
            p.data = blob.astype(p.data.dtype).copy()
            loaded += 1
        return loaded


def _seed_limbs(seed: int) -> np.ndarray:
    return np.array([(seed >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4").tobytes())


def save_checkpoint(path, model: SnippetSegmenter, optimizer: Adam | None = None,
                    scheduler: PlateauScheduler | None = None, epoch: int = 0,
                    best_val: float = float("inf"), seed: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.named_parameters()]
    blobs.append(("opt.epoch", np.array([epoch], dtype=np.float32)))
    blobs.append(("opt.best_val", np.array([best_val], dtype=np.float32)))
    if optimizer is not None:
        blobs.append(("opt.step", np.array([optimizer.step_count], dtype=np.float32)))
        blobs.append(("opt.lr", np.array([optimizer.lr], dtype=np.float32)))
        for n, m in optimizer.m.items():
            blobs.append((f"opt.m.{n}", m))
        for n, v in optimizer.v.items():
            blobs.append((f"opt.v.{n}", v))
    if scheduler is not None:
        blobs.append(("opt.sched_best", np.array([scheduler.best], dtype=np.float32)))
        blobs.append(("opt.sched_stagnant", np.array([scheduler.stagnant], dtype=np.float32)))
    blobs.append(("rng.seed", _seed_limbs(seed)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            _write_blob(fh, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    count = struct.unpack_from("<I", raw, 8)[0]
    pos = 12
    params: dict[str, np.ndarray] = {}
    opt: dict[str, np.ndarray] = {}
    rng: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
        if name.startswith("opt."):
            opt[name[4:]] = arr
        elif name.startswith("rng."):
            rng[name[4:]] = arr
        else:
            params[name] = arr
    return Checkpoint(version=version, params=params, opt=opt, rng=rng)


def apply_freeze(model: SnippetSegmenter, freeze_set) -> SnippetSegmenter:
    """Exclude whole components (letters a-e) from gradient flow and
    optimizer state."""
    freeze = set(freeze_set)
    unknown = freeze - set(COMPONENT_ATTRS)
    if unknown:
        raise ValueError(f"unknown freeze letters {sorted(unknown)}; valid: a-e")
    for name, p in model.named_parameters():
        if name.split(".", 1)[0] in freeze:
            p.requires_grad = False
            p.grad = None
    return model


# ---- the epoch loop --------------------------------------------------------


def _snippet_tensors(s: Snippet) -> list[Tensor]:
    return [Tensor(f.image) for f in s.frames]


def _val_metrics(model: SnippetSegmenter, snippets: list[Snippet]) -> tuple[float, float]:
    losses, dscs = [], []
    with T.no_grad():
        for s in snippets:
            out, _ = model.forward(_snippet_tensors(s))
            losses.append(float(combined_loss(out, s.label).data))
            pred = out.probs.data >= 0.5
            for c in range(2):
                dscs.append(dsc(pred[c], s.label[c] >= 0.5))
    return float(np.mean(losses)), float(np.mean(dscs))


def fit(model: SnippetSegmenter, train_snippets: list[Snippet],
        val_snippets: list[Snippet], cfg: TrainConfig,
        log_path=None) -> tuple[list[dict], Checkpoint]:
    """Run the epoch loop; returns (log rows, best-validation checkpoint).

    Deterministic given (cfg.seed, data): shuffling, augmentation and
    initialization all derive from the one seed.
    """
    cfg.validate()
    if not train_snippets or not val_snippets:
        raise ValueError("training and validation streams must be non-empty")
    if cfg.init_from:
        load_checkpoint(cfg.init_from).apply(model)
    if cfg.freeze_set:
        apply_freeze(model, cfg.freeze_set)

    params = dict(model.named_parameters())
    optimizer = Adam(params, lr=cfg.lr0)
    scheduler = PlateauScheduler(cfg.lr0, patience=cfg.plateau_epochs,
                                 factor=cfg.lr_decay, threshold=cfg.plateau_threshold)
    log: list[dict] = []
    best_val = float("inf")
    best_state: Checkpoint | None = None
    n = len(train_snippets)

    for epoch in range(1, cfg.max_epochs + 1):
        order = vrng.generator(cfg.seed, "shuffle", epoch).permutation(n)
        epoch_losses = []
        for b0 in range(0, n, cfg.batch_size):
            batch_ids = order[b0 : b0 + cfg.batch_size]
            total = None
            for idx in batch_ids:
                s = train_snippets[idx]
                if cfg.augment:
                    s = augment(s, vrng.generator(cfg.seed, "augment", epoch, int(idx)))
                out, _ = model.forward(_snippet_tensors(s))
                loss = combined_loss(out, s.label)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch_ids))
            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, "
                                   f"batch {b0 // cfg.batch_size}")
            optimizer.zero_grad()
            T.backward(total)
            optimizer.step()
            epoch_losses.append(loss_val)

        val_loss, val_dsc = _val_metrics(model, val_snippets)
        lr_used = optimizer.lr
        optimizer.lr = scheduler.step(val_loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
               "val_loss": val_loss, "lr": lr_used, "val_dsc": val_dsc}
        log.append(row)
        if val_loss < best_val:
            best_val = val_loss
            best_state = Checkpoint(
                version=VERSION,
                params={name: p.data.copy() for name, p in params.items()},
                opt={"epoch": np.array([epoch], dtype=np.float32),
                     "best_val": np.array([best_val], dtype=np.float32)},
                rng={"seed": _seed_limbs(cfg.seed)})
        if cfg.stop_at_val_dsc is not None and val_dsc >= cfg.stop_at_val_dsc:
            break

    if log_path is not None:
        write_log_csv(log_path, log)
    assert best_state is not None
    return log, best_state


def write_log_csv(path, log: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss",
                                                "lr", "val_dsc"])
        writer.writeheader()
        for row in log:
            writer.writerow({k: (f"{v:.8f}" if isinstance(v, float) else v)
                             for k, v in row.items()})

"""Operator command line: reproducible dataset synthesis, training,
evaluation, sweeps, ablations, transfer runs, label fusion, heatmaps,
gradient checking and cost reports.

Configuration comes from built-in defaults, optionally overlaid with a
JSON config file (--config) and dotted-path command-line overrides
(--key value, e.g. --train.max_epochs 5).  Unknown keys are rejected.  The
fully resolved configuration is echoed to <out>/resolved.json; re-running
from that file reproduces the outputs bit for bit.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import costs
from . import tensor as T
from .backbone import BackboneConfig
from .dataset import (SynthConfig, load_manifest, synth_generate,
                      window_snippets, with_center_noise)
from .decoder import DecoderConfig
from .gradcam import gradcam
from .losses import combined_loss
from .metrics import CHANNEL_NAMES, evaluate_pairs
from .model import ModelConfig, SnippetSegmenter
from .pgm import read_pgm, write_pgm
from .staple import staple_fuse
from .swin import SwinConfig
from .tcm import TCMConfig
from .tensor import Tensor
from .training import (TrainConfig, apply_freeze, fit, load_checkpoint,
                       save_checkpoint)

COMMANDS = ("synth", "train", "eval", "sweep-t", "ablate", "transfer", "fuse",
            "gradcam", "gradcheck", "cost")

DEFAULT_CONFIG: dict = {
    "seed": 42,
    "out": "runs/run",
    "dataset": {
        "root": "data/synth",
        "num_sequences": 14,
        "frames_per_sequence": 20,
        "h": 64,
        "w": 64,
        "noise_sigma": 0.05,
        "absent_fraction": 0.15,
        "speed": 1.0,
        "center_noise_sigma": 0.0,
    },
    "model": {
        "t": 5,
        "backbone_channels": [16, 32, 64, 128],
        "blocks_per_stage": 2,
        "tcm_enabled": True,
        "tcm_reduction": 4,
        "tcm_include_center": True,
        "tcm_tied_neighbors": False,
        "embed_dim": 64,
        "depths": [2, 2],
        "heads": [4, 4],
        "window_size": [4, 4],
        "mlp_ratio": 4,
        "patch_size": 1,
        "merge_between_stages": "auto",
        "decoder_channels": [128, 64, 32, 16],
        "tsc_enabled": True,
        "skips_enabled": True,
    },
    "train": {
        "batch_size": 2,
        "lr0": 1e-3,
        "plateau_epochs": 20,
        "lr_decay": 0.8,
        "max_epochs": 30,
        "augment": True,
        "stop_at_val_dsc": None,
    },
    "eval": {"checkpoint": "", "split": "test", "save_maps": True},
    "transfer": {"init_from": "", "freeze": "", "lr": 1e-4},
    "fuse": {"inputs": [], "output": "fused.pgm"},
    "gradcam": {"checkpoint": "", "channel": 0, "count": 4, "split": "test"},
    "gradcheck": {"samples": 3, "tolerance": 1e-4},
    "sweep_t": {"values": [3, 5, 7, 9, 11, 13]},
    "ablate": {},
    "cost": {},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, overlay: dict, path: str = "") -> None:
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        else:
            base[key] = value


def _coerce_override(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return json.loads(raw)
    if current is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[leaf] = _coerce_override(node[leaf], raw)


def resolve_config(config_path: str | None, overrides: list[tuple[str, str]]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        with open(config_path) as fh:
            doc = json.load(fh)
        doc.pop("command", None)  # resolved.json echoes are reusable as configs
        _merge(cfg, doc)
    for dotted, raw in overrides:
        _apply_override(cfg, dotted, raw)
    return cfg


def model_config_from(cfg: dict) -> ModelConfig:
    d, m = cfg["dataset"], cfg["model"]
    merge = m["merge_between_stages"]
    if isinstance(merge, str) and merge != "auto":
        raise ConfigError(f"merge_between_stages must be true, false or 'auto', got {merge!r}")
    return ModelConfig(
        h=d["h"], w=d["w"], t=m["t"],
        backbone=BackboneConfig(stage_channels=tuple(m["backbone_channels"]),
                                blocks_per_stage=m["blocks_per_stage"]),
        tcm=TCMConfig(enabled=m["tcm_enabled"], reduction=m["tcm_reduction"],
                      include_center=m["tcm_include_center"],
                      tied_neighbors=m["tcm_tied_neighbors"]),
        swin=SwinConfig(embed_dim=m["embed_dim"], depths=tuple(m["depths"]),
                        heads=tuple(m["heads"]),
                        window_size=tuple(m["window_size"]),
                        mlp_ratio=m["mlp_ratio"], patch_size=m["patch_size"],
                        merge_between_stages=merge),
        decoder=DecoderConfig(stage_channels=tuple(m["decoder_channels"]),
                              tsc_enabled=m["tsc_enabled"],
                              skips_enabled=m["skips_enabled"]))


def train_config_from(cfg: dict, **extra) -> TrainConfig:
    t = cfg["train"]
    kwargs = dict(batch_size=t["batch_size"], lr0=t["lr0"],
                  plateau_epochs=t["plateau_epochs"], lr_decay=t["lr_decay"],
                  max_epochs=t["max_epochs"], seed=cfg["seed"],
                  snippet_t=cfg["model"]["t"], augment=t["augment"],
                  stop_at_val_dsc=t["stop_at_val_dsc"])
    kwargs.update(extra)
    return TrainConfig(**kwargs)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_resolved(cfg: dict, command: str) -> Path:
    out = _out_dir(cfg)
    doc = dict(cfg)
    doc["command"] = command
    with open(out / "resolved.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return out


def num_workers() -> int:
    """Data-loading concurrency cap from VSWU_NUM_WORKERS (default 1)."""
    raw = os.environ.get("VSWU_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"VSWU_NUM_WORKERS must be an integer, got {raw!r}")


def _load_split_snippets(cfg: dict, split: str):
    manifest = load_manifest(cfg["dataset"]["root"])
    snippets = window_snippets(manifest, cfg["model"]["t"], splits=(split,),
                               workers=num_workers())
    sigma = cfg["dataset"]["center_noise_sigma"]
    if sigma > 0:
        snippets = with_center_noise(snippets, sigma, cfg["seed"])
    return snippets


# ---- commands ---------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    d = cfg["dataset"]
    synth = SynthConfig(num_sequences=d["num_sequences"],
                        frames_per_sequence=d["frames_per_sequence"],
                        h=d["h"], w=d["w"], seed=cfg["seed"],
                        noise_sigma=d["noise_sigma"],
                        absent_fraction=d["absent_fraction"], speed=d["speed"])
    manifest = synth_generate(synth, d["root"])
    _echo_resolved(cfg, "synth")
    counts = {}
    for s in manifest.sequences:
        counts[s.split] = counts.get(s.split, 0) + 1
    print(f"synth: wrote {len(manifest.sequences)} sequences to {d['root']} "
          f"(splits: {counts})")
    return 0


def _train_once(cfg: dict, out: Path, model: SnippetSegmenter | None = None,
                train_cfg: TrainConfig | None = None):
    train = _load_split_snippets(cfg, "train")
    val = _load_split_snippets(cfg, "val")
    if model is None:
        model = SnippetSegmenter(model_config_from(cfg), seed=cfg["seed"])
    if train_cfg is None:
        train_cfg = train_config_from(cfg)
    log, best = fit(model, train, val, train_cfg, log_path=out / "log.csv")
    ck_dir = out / "checkpoints"
    save_checkpoint(ck_dir / "final.ckpt", model, epoch=len(log),
                    best_val=best.best_val_loss, seed=cfg["seed"])
    for name, p in model.named_parameters():
        p.data = best.params[name].astype(p.data.dtype).copy()
    save_checkpoint(ck_dir / "best.ckpt", model, epoch=best.epoch,
                    best_val=best.best_val_loss, seed=cfg["seed"])
    return model, log, best


def cmd_train(cfg: dict) -> int:
    out = _echo_resolved(cfg, "train")
    model, log, best = _train_once(cfg, out)
    last = log[-1]
    print(f"train: {len(log)} epochs, best val loss {best.best_val_loss:.5f}, "
          f"final val DSC {last['val_dsc']:.4f}; outputs in {out}")
    return 0


def _evaluate(model: SnippetSegmenter, snippets, out: Path | None,
              save_maps: bool):
    pairs = {name: [] for name in CHANNEL_NAMES}
    for i, s in enumerate(snippets):
        probs = model.predict([f.image for f in s.frames])
        pred = probs >= 0.5
        for c, name in enumerate(CHANNEL_NAMES):
            pairs[name].append((pred[c], s.label[c] >= 0.5))
        if save_maps and out is not None and i < 16:
            maps_dir = out / "maps"
            maps_dir.mkdir(exist_ok=True)
            for c, name in enumerate(CHANNEL_NAMES):
                write_pgm(maps_dir / f"pred_{name}_{i:04d}.pgm",
                          (probs[c] * 255).astype(np.uint8))
    params, flops = costs.count_params_flops(model)
    return evaluate_pairs(pairs, params=params, flops=flops)


def cmd_eval(cfg: dict) -> int:
    out = _echo_resolved(cfg, "eval")
    model = SnippetSegmenter(model_config_from(cfg), seed=cfg["seed"])
    ck_path = cfg["eval"]["checkpoint"] or str(out / "checkpoints" / "best.ckpt")
    load_checkpoint(ck_path).apply(model)
    snippets = _load_split_snippets(cfg, cfg["eval"]["split"])
    report = _evaluate(model, snippets, out, cfg["eval"]["save_maps"])
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    with open(reports / "metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    for name, ch in report.channels.items():
        hd = f"{ch.hd95:.4f}" if ch.hd95 is not None else "undefined"
        print(f"eval[{name}]: dsc={ch.dsc:.4f} hd95={hd} "
              f"sens={ch.sensitivity:.4f} spec={ch.specificity:.4f}")
    print(f"eval: report in {reports / 'metrics.json'}")
    return 0


def cmd_sweep_t(cfg: dict) -> int:
    out = _echo_resolved(cfg, "sweep-t")
    rows = []
    for t in cfg["sweep_t"]["values"]:
        sub = copy.deepcopy(cfg)
        sub["model"]["t"] = t
        sub_out = out / f"t{t}"
        sub_out.mkdir(parents=True, exist_ok=True)
        model, log, best = _train_once(sub, sub_out)
        val = _load_split_snippets(sub, "val")
        report = _evaluate(model, val, None, False)
        mean_dsc = float(np.mean([c.dsc for c in report.channels.values()]))
        rows.append({"t": t, "val_dsc": mean_dsc,
                     "best_val_loss": best.best_val_loss,
                     "params": report.params, "flops": report.flops})
        print(f"sweep-t: t={t} val_dsc={mean_dsc:.4f}")
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    with open(reports / "sweep_t.csv", "w") as fh:
        fh.write("t,val_dsc,best_val_loss,params,flops\n")
        for r in rows:
            fh.write(f"{r['t']},{r['val_dsc']:.6f},{r['best_val_loss']:.6f},"
                     f"{r['params']},{r['flops']}\n")
    print(f"sweep-t: table in {reports / 'sweep_t.csv'}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    out = _echo_resolved(cfg, "ablate")
    rows = []
    for tcm_on in (True, False):
        for tsc_on in (True, False):
            for skips_on in (True, False):
                sub = copy.deepcopy(cfg)
                sub["model"]["tcm_enabled"] = tcm_on
                sub["model"]["tsc_enabled"] = tsc_on
                sub["model"]["skips_enabled"] = skips_on
                tag = f"tcm{int(tcm_on)}_tsc{int(tsc_on)}_skips{int(skips_on)}"
                sub_out = out / tag
                sub_out.mkdir(parents=True, exist_ok=True)
                model, log, best = _train_once(sub, sub_out)
                val = _load_split_snippets(sub, "val")
                report = _evaluate(model, val, None, False)
                mean_dsc = float(np.mean([c.dsc for c in report.channels.values()]))
                rows.append({"tcm": tcm_on, "tsc": tsc_on, "skips": skips_on,
                             "val_dsc": mean_dsc, "params": report.params})
                print(f"ablate: {tag} val_dsc={mean_dsc:.4f} params={report.params}")
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    with open(reports / "ablate.csv", "w") as fh:
        fh.write("tcm,tsc,skips,val_dsc,params\n")
        for r in rows:
            fh.write(f"{int(r['tcm'])},{int(r['tsc'])},{int(r['skips'])},"
                     f"{r['val_dsc']:.6f},{r['params']}\n")
    print(f"ablate: table in {reports / 'ablate.csv'}")
    return 0


def cmd_transfer(cfg: dict) -> int:
    out = _echo_resolved(cfg, "transfer")
    tr = cfg["transfer"]
    if not tr["init_from"]:
        raise ConfigError("transfer requires transfer.init_from (a checkpoint path)")
    model = SnippetSegmenter(model_config_from(cfg), seed=cfg["seed"])
    load_checkpoint(tr["init_from"]).apply(model)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    freeze = tuple(x for x in tr["freeze"].replace(",", "").strip() if x)
    apply_freeze(model, freeze)
    train_cfg = train_config_from(cfg, lr0=tr["lr"], freeze_set=freeze,
                                  init_from=tr["init_from"])
    train = _load_split_snippets(cfg, "train")
    val = _load_split_snippets(cfg, "val")
    log, best = fit(model, train, val, train_cfg, log_path=out / "log.csv")
    save_checkpoint(out / "checkpoints" / "final.ckpt", model, epoch=len(log),
                    best_val=best.best_val_loss, seed=cfg["seed"])
    deltas = {}
    for n, p in model.named_parameters():
        letter = n.split(".", 1)[0]
        delta = float(np.abs(p.data - before[n]).max())
        deltas[letter] = max(deltas.get(letter, 0.0), delta)
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    with open(reports / "transfer.json", "w") as fh:
        json.dump({"frozen": sorted(freeze), "max_abs_param_delta": deltas,
                   "val_loss_start": log[0]["val_loss"],
                   "val_loss_best": best.best_val_loss}, fh, indent=2, sort_keys=True)
    for letter in sorted(deltas):
        state = "frozen" if letter in freeze else "tuned"
        print(f"transfer: component {letter} ({state}) max param delta "
              f"{deltas[letter]:.3e}")
    return 0


def cmd_fuse(cfg: dict) -> int:
    out = _echo_resolved(cfg, "fuse")
    paths = cfg["fuse"]["inputs"]
    if len(paths) < 2:
        raise ConfigError("fuse requires at least two rater mask paths in fuse.inputs")
    masks = [(read_pgm(p) > 127).astype(np.float64) for p in paths]
    result = staple_fuse(np.stack(masks))
    fused_path = out / cfg["fuse"]["output"]
    write_pgm(fused_path, result.fused.astype(np.uint8) * 255)
    sidecar = {
        "inputs": list(paths),
        "sensitivity": [float(v) for v in result.sensitivity],
        "specificity": [float(v) for v in result.specificity],
        "iterations": result.iterations,
        "converged": result.converged,
    }
    with open(fused_path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    print(f"fuse: {len(paths)} raters -> {fused_path} "
          f"(converged={result.converged}, iterations={result.iterations})")
    return 0


def cmd_gradcam(cfg: dict) -> int:
    out = _echo_resolved(cfg, "gradcam")
    g = cfg["gradcam"]
    model = SnippetSegmenter(model_config_from(cfg), seed=cfg["seed"])
    ck_path = g["checkpoint"] or str(out / "checkpoints" / "best.ckpt")
    load_checkpoint(ck_path).apply(model)
    snippets = _load_split_snippets(cfg, g["split"])[: g["count"]]
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    for i, s in enumerate(snippets):
        cam = gradcam(model, s, g["channel"])
        write_pgm(maps_dir / f"gradcam_ch{g['channel']}_{i:04d}.pgm",
                  (cam * 255).astype(np.uint8))
    print(f"gradcam: wrote {len(snippets)} heatmaps to {maps_dir}")
    return 0


def _gradcheck_suite(samples: int, tolerance: float) -> dict:
    """Finite-difference checks for each kernel plus a tiny composite model."""
    results = {}
    with T.precision("float64"):
        rng = np.random.default_rng(7)

        def record(name, fn, x):
            err = T.finite_diff_check(fn, Tensor(x))
            results[name] = max(results.get(name, 0.0), err)

        for s in range(samples):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 2))
            bt = Tensor(b.copy())
            record("matmul", lambda t: (T.matmul(t, bt) ** 2).sum(), a)
            k = Tensor(rng.normal(size=(2, 2, 3, 3)))
            bias = Tensor(rng.normal(size=(2,)))
            record("conv2d", lambda t: (T.conv2d(t, k, stride=2, pad=1, bias=bias) ** 2).sum(),
                   rng.normal(size=(2, 6, 6)))
            record("softmax", lambda t: (T.softmax(t, -1) ** 2).sum(), rng.normal(size=(3, 5)))
            gm = Tensor(rng.normal(size=(6,)))
            bt2 = Tensor(rng.normal(size=(6,)))
            record("layer_norm", lambda t: (T.layer_norm(t, gm, bt2) ** 2).sum(),
                   rng.normal(size=(4, 6)))
            record("gelu", lambda t: (T.gelu(t) ** 2).sum(), rng.normal(size=(8,)))
            record("sigmoid", lambda t: (T.sigmoid(t) ** 2).sum(), rng.normal(size=(8,)))
            record("upsample2x", lambda t: (T.upsample2x(t) ** 2).sum(), rng.normal(size=(2, 3, 3)))

        comp_cfg = ModelConfig(
            h=16, w=16, t=3,
            backbone=BackboneConfig(stage_channels=(2, 4, 6, 8), blocks_per_stage=2),
            swin=SwinConfig(embed_dim=8, depths=(2,), heads=(2,), window_size=(1,)),
            decoder=DecoderConfig(stage_channels=(8, 6, 4, 4)))
        model = SnippetSegmenter(comp_cfg, seed=3)
        frames = [Tensor(rng.random((1, 16, 16))) for _ in range(3)]
        label = (rng.random((2, 16, 16)) > 0.5).astype(np.float64)

        def composite(t):
            trial = [frames[0], t, frames[2]]
            out, _ = model.forward(trial)
            return combined_loss(out, label)

        results["composite"] = T.finite_diff_check(composite, frames[1])
    return {"tolerance": tolerance, "max_relative_error": results,
            "passed": all(v <= tolerance for v in results.values())}


def cmd_gradcheck(cfg: dict) -> int:
    out = _echo_resolved(cfg, "gradcheck")
    report = _gradcheck_suite(cfg["gradcheck"]["samples"], cfg["gradcheck"]["tolerance"])
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    with open(reports / "gradcheck.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for name, err in sorted(report["max_relative_error"].items()):
        print(f"gradcheck: {name:12s} max rel err {err:.3e}")
    if not report["passed"]:
        print("error: gradcheck exceeded tolerance", file=sys.stderr)
        return 1
    print(f"gradcheck: all kernels within {report['tolerance']:g}")
    return 0


def cmd_cost(cfg: dict) -> int:
    out = _echo_resolved(cfg, "cost")
    mc = model_config_from(cfg)
    model = SnippetSegmenter(mc, seed=cfg["seed"])
    params, flops = costs.count_params_flops(model)
    runtime = costs.runtime_param_count(model)
    m = cfg["model"]
    scaling = [
        {"tokens": n,
         "windowed_flops": costs.window_attention_flops(
             n, m["window_size"][0], m["embed_dim"], m["heads"][0]),
         "dense_flops": costs.dense_attention_flops(n, m["embed_dim"], m["heads"][0])}
        for n in (64, 256, 1024)
    ]
    doc = {"params_analytic": params, "params_runtime": runtime,
           "flops_forward_snippet": flops,
           "per_component": costs.component_costs(mc),
           "attention_scaling": scaling,
           "flop_convention": "multiply+add counted as 2 operations"}
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    with open(reports / "cost.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(f"cost: params={params} (runtime {runtime}), forward flops={flops}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-t": cmd_sweep_t,
    "ablate": cmd_ablate,
    "transfer": cmd_transfer,
    "fuse": cmd_fuse,
    "gradcam": cmd_gradcam,
    "gradcheck": cmd_gradcheck,
    "cost": cmd_cost,
}


def _parse_overrides(rest: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            i += 1
            if i >= len(rest):
                raise ConfigError(f"override {tok} is missing its value")
            raw = rest[i]
        overrides.append((key, raw))
        i += 1
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vswu",
        description="Spatio-temporal snippet segmentation toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="JSON config file")
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(rest)
        cfg = resolve_config(args.config, overrides)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Stage orchestration over an experiment directory.

Each stage writes into ``<workdir>/<stage>/`` together with a
``provenance.json`` holding the hash of the config sections it reads, the
output hashes of its upstream stages and the package version. A stage whose
provenance matches is skipped unless forced.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .geometry import read_view_pairs, select_view_pairs, write_view_pairs
from .io import atomic_write_text, load_manifest, read_jsonl, save_pair_batch, write_jsonl
from .regions import load_region_map, regions_from_labels, save_region_map, segment_graph
from .sampling import SamplingConfig, pair_supply_size, prepare_view_pair, sample_pair_batch
from .ssl.encoder import Encoder
from .ssl.pretrain import PairSource, pretrain
from .supervise import (
    FinetuneConfig,
    SegmentationModel,
    evaluate_miou,
    finetune,
    labeled_set,
    split_labeled,
    write_overlay,
)
from .synthworld import build_world

log = logging.getLogger(__name__)

STAGES = ("genworld", "pair-select", "segment", "match-regions", "sample-pairs", "pretrain", "finetune", "eval")
UPSTREAM = {
    "genworld": (),
    "pair-select": ("genworld",),
    "segment": ("genworld",),
    "match-regions": ("pair-select", "segment"),
    "sample-pairs": ("match-regions",),
    "pretrain": ("sample-pairs",),
    "finetune": ("genworld",),
    "eval": ("finetune",),
}
SECTIONS = {
    "genworld": ("dataset",),
    "pair-select": ("pairing",),
    "segment": ("regions",),
    "match-regions": ("matching", "pairing"),
    "sample-pairs": ("sampling",),
    "pretrain": ("ssl", "sampling", "matching", "pairing"),
    "finetune": ("supervise",),
    "eval": ("supervise",),
}
AXES = ("strategy", "iou_band", "fraction")


class DependencyError(RuntimeError):
    """An upstream stage has not been run."""


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" or "up to date"
    outdir: Path
    provenance: dict


class Workspace:
    """Maps each stage to its output directory; ablations share upstream directories."""

    def __init__(self, root, overrides: dict[str, Path] | None = None):
        self.root = Path(root)
        self.overrides = {k: Path(v) for k, v in (overrides or {}).items()}

    def dir(self, stage: str) -> Path:
        return self.overrides.get(stage, self.root / stage)

    def derive(self, root, shared: Sequence[str]) -> "Workspace":
        """A new workspace under ``root`` reusing this one's directories for ``shared`` stages."""
        return Workspace(root, {s: self.dir(s) for s in shared})


def _provenance(ws: Workspace, stage: str) -> dict | None:
    p = ws.dir(stage) / "provenance.json"
    return json.loads(p.read_text()) if p.exists() else None


def _hash_outputs(outdir: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(outdir.rglob("*")):
        if p.is_file() and p.name not in ("provenance.json", "effective_config.json"):
            h.update(str(p.relative_to(outdir)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _dependencies(ws: Workspace, stage: str, cfg: ExperimentConfig) -> tuple[str, ...]:
    deps = UPSTREAM[stage]
    if stage == "finetune" and cfg.supervise.init == "pretrain":
        deps = deps + ("pretrain",)
    return deps


def run_stage(stage: str, config: ExperimentConfig, workdir, *, force: bool = False, jobs: int = 1) -> StageResult:
    """Run one stage if its inputs or config changed since the last run."""
    ws = workdir if isinstance(workdir, Workspace) else Workspace(workdir)
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    inputs = {}
    for dep in _dependencies(ws, stage, config):
        prov = _provenance(ws, dep)
        if prov is None:
            raise DependencyError(f"stage {stage!r} needs the outputs of {dep!r}; run `regconsist {dep}` first")
        inputs[dep] = prov["output_hash"]
    record = {
        "stage": stage,
        "config_hash": config.section_hash(*SECTIONS[stage]),
        "inputs": inputs,
        "version": __version__,
    }
    outdir = ws.dir(stage)
    old = _provenance(ws, stage)
    if not force and old is not None and all(old.get(k) == v for k, v in record.items()):
        log.info("%s: up to date", stage)
        return StageResult(stage, "up to date", outdir, old)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    _RUNNERS[stage](config, ws, outdir, jobs)
    record["seconds"] = round(time.perf_counter() - t0, 3)
    record["config"] = {s: _section_dict(config, s) for s in SECTIONS[stage]}
    record["output_hash"] = _hash_outputs(outdir)
    config.save(outdir / "effective_config.json")
    atomic_write_text(outdir / "provenance.json", json.dumps(record, indent=2))
    return StageResult(stage, "ran", outdir, record)


def run_all(config: ExperimentConfig, workdir, *, force: bool = False, jobs: int = 1) -> list[StageResult]:
    ws = workdir if isinstance(workdir, Workspace) else Workspace(workdir)
    stages = [s for s in STAGES if not (s == "pretrain" and config.supervise.init != "pretrain")]
    return [run_stage(s, config, ws, force=force, jobs=jobs) for s in stages]


def _section_dict(config, name):
    return asdict(getattr(config, name))


# --- loaders shared by stages -------------------------------------------------


def load_dataset(ws: Workspace):
    info = json.loads((ws.dir("genworld") / "dataset.json").read_text())
    return load_manifest(info["manifest"])


def load_regions(ws: Workspace, ids) -> dict:
    d = ws.dir("segment")
    return {i: load_region_map(d / f"{i}.pgm") for i in ids}


def _camera(manifest):
    cams = list(manifest.cameras.values())
    if len(cams) != 1:
        raise ConfigError("the pipeline expects a single camera model per dataset")
    return cams[0]


# --- stage runners ------------------------------------------------------------


def _genworld(cfg: ExperimentConfig, ws, out: Path, jobs):
    ds = cfg.dataset
    if ds.manifest:
        manifest = load_manifest(ds.manifest)
        path = Path(ds.manifest).resolve()
        if path.is_dir():
            path = path / "manifest.json"
    else:
        world = Path(ds.out) if ds.out else out / "world"
        manifest = build_world(
            world,
            ds.seed,
            ds.n_objects,
            tuple(ds.room_extent),
            n_object_classes=ds.n_object_classes,
            height=ds.height,
            grid_step=ds.grid_step,
            yaw_step=ds.yaw_step,
            pitch=ds.pitch,
        )
        path = (world / "manifest.json").resolve()
    atomic_write_text(out / "dataset.json", json.dumps({"manifest": str(path), "frames": len(manifest.frames)}))


def _pair_select(cfg, ws, out, jobs):
    manifest = load_dataset(ws)
    p = cfg.pairing
    pairs = select_view_pairs(
        manifest, p.iou_l, p.iou_h, _camera(manifest), p.epsilon_rel, cache_dir=ws.root / "cache", downsample=p.downsample, jobs=jobs
    )
    write_view_pairs(pairs, out / "view_pairs.jsonl")
    log.info("pair-select: %d view pairs in [%g, %g]", len(pairs), p.iou_l, p.iou_h)


def _segment(cfg, ws, out, jobs):
    manifest = load_dataset(ws)
    r = cfg.regions
    for fid in manifest.ids:
        frame = manifest.load_frame(fid)
        if r.source == "labels":
            if frame.labels is None:
                raise ConfigError(f"regions.source='labels' but frame {fid} has no labels")
            regmap = regions_from_labels(frame.labels)
        else:
            regmap = segment_graph(frame.rgb, r.scale, r.sigma, r.min_size, mode=r.mode)
        save_region_map(regmap, out / f"{fid}.pgm")


def _frames(manifest, ids):
    return {i: manifest.load_frame(i) for i in ids}


def _used_ids(pairs):
    return sorted({vp.id1 for vp in pairs} | {vp.id2 for vp in pairs})


def _match_regions(cfg, ws, out, jobs):
    manifest = load_dataset(ws)
    pairs = read_view_pairs(ws.dir("pair-select") / "view_pairs.jsonl")
    ids = _used_ids(pairs)
    frames, regions = _frames(manifest, ids), load_regions(ws, ids)
    cam = _camera(manifest)
    rows = []
    for vp in pairs:
        for a, b in ((vp.id1, vp.id2), (vp.id2, vp.id1)):
            data = prepare_view_pair(
                frames[a], frames[b], cam, regions[a], regions[b], cfg.pairing.epsilon_rel, cfg.matching.tau_region
            )
            m = data.matches
            rows.append({"id1": a, "id2": b, "u": m.u.tolist(), "v": m.v.tolist(), "iou": m.iou.tolist()})
    write_jsonl(out / "matches.jsonl", rows)


def _sample_pairs(cfg, ws, out, jobs):
    """Un-augmented reference batches, one per view pair with a non-empty pool, plus supply counts."""
    manifest = load_dataset(ws)
    pairs = read_view_pairs(ws.dir("pair-select") / "view_pairs.jsonl")
    ids = _used_ids(pairs)
    frames, regions = _frames(manifest, ids), load_regions(ws, ids)
    cam = _camera(manifest)
    s = cfg.sampling
    scfg = SamplingConfig.from_strategy(s.strategy, pairs_per_batch=s.pairs_per_batch, seed=s.seed, max_retries=s.max_retries)
    (out / "batches").mkdir(exist_ok=True)
    stats = []
    for k, vp in enumerate(pairs):
        data = prepare_view_pair(
            frames[vp.id1], frames[vp.id2], cam, regions[vp.id1], regions[vp.id2], cfg.pairing.epsilon_rel, cfg.matching.tau_region
        )
        supply = pair_supply_size(data, scfg.matcher)
        row = {"id1": vp.id1, "id2": vp.id2, "supply": int(supply), "emitted": 0}
        if supply:
            batch = sample_pair_batch(data, scfg, rng=s.seed + k)
            save_pair_batch(batch, out / "batches" / f"{vp.id1}__{vp.id2}.rcpb")
            row["emitted"] = len(batch)
        stats.append(row)
    write_jsonl(out / "supply.jsonl", stats)
    if not any(r["supply"] for r in stats):
        raise ConfigError(f"no view pair offers any pixel pair under strategy {s.strategy!r}")


def _pretrain(cfg, ws, out, jobs):
    manifest = load_dataset(ws)
    pairs = read_view_pairs(ws.dir("pair-select") / "view_pairs.jsonl")
    ids = _used_ids(pairs)
    source = PairSource(
        _frames(manifest, ids), pairs, _camera(manifest), load_regions(ws, ids), cfg.pairing.epsilon_rel, cfg.matching.tau_region
    )
    s = cfg.sampling
    scfg = SamplingConfig.from_strategy(s.strategy, pairs_per_batch=s.pairs_per_batch, seed=s.seed, max_retries=s.max_retries)
    result = pretrain(source, scfg, cfg.ssl)
    result.write_log(out / "loss.csv")
    result.encoder.save(out / "encoder.ckpt", {"strategy": s.strategy, "seed": cfg.ssl.seed})


def _split(cfg, manifest):
    sv = cfg.supervise
    train, _ = split_labeled(manifest, sv.fraction, sv.seed)
    _, test = split_labeled(manifest, sv.eval_fraction or sv.fraction, sv.seed)
    if set(train) & set(test):
        raise ConfigError("eval_fraction must be at least the training fraction")
    return train, test


def _num_classes(manifest):
    if manifest.num_classes is None:
        raise ConfigError("the manifest does not declare num_classes")
    return manifest.num_classes


def _finetune(cfg, ws, out, jobs):
    manifest = load_dataset(ws)
    sv = cfg.supervise
    train, test = _split(cfg, manifest)
    if sv.init == "pretrain":
        encoder = Encoder.load(ws.dir("pretrain") / "encoder.ckpt")
    elif sv.init == "random":
        encoder = None
    else:
        encoder = Encoder.load(sv.init)
    data = labeled_set([manifest.load_frame(i) for i in train], cfg.ssl.input_size)
    ft = FinetuneConfig(
        mode=sv.mode,
        iters=sv.iters,
        base_lr=sv.base_lr,
        head_lr_mult=sv.head_lr_mult,
        power=sv.power,
        weight_decay=sv.weight_decay,
        gamma=sv.gamma,
        batch_size=sv.batch_size,
        input_size=cfg.ssl.input_size,
        ignore_label=manifest.ignore_label,
        seed=sv.seed,
    )
    result = finetune(encoder, data, _num_classes(manifest), ft, encoder_config=cfg.ssl.encoder_config)
    result.model.save(out / "model.ckpt", {"init": sv.init})
    atomic_write_text(out / "split.json", json.dumps({"train": train, "test": test}, indent=1))


def _eval(cfg, ws, out, jobs):
    manifest = load_dataset(ws)
    model = SegmentationModel.load(ws.dir("finetune") / "model.ckpt")
    test = json.loads((ws.dir("finetune") / "split.json").read_text())["test"]
    frames = [manifest.load_frame(i) for i in test]
    report = evaluate_miou(model, frames, _num_classes(manifest), manifest.ignore_label, manifest.class_names)
    report.write(out / "report.json")
    for fr in frames[: cfg.supervise.overlays]:
        write_overlay(out / "overlays" / f"{fr.id}.ppm", fr.rgb, model.predict_frame(fr), model.num_classes)


_RUNNERS = {
    "genworld": _genworld,
    "pair-select": _pair_select,
    "segment": _segment,
    "match-regions": _match_regions,
    "sample-pairs": _sample_pairs,
    "pretrain": _pretrain,
    "finetune": _finetune,
    "eval": _eval,
}


def read_report(ws: Workspace) -> dict:
    return json.loads((ws.dir("eval") / "report.json").read_text())


# --- ablations ----------------------------------------------------------------


def _parse_value(axis: str, value):
    if axis == "strategy":
        SamplingConfig.from_strategy(value)
        return value
    if axis == "fraction":
        v = float(value)
        if not 0 < v < 1:
            raise ConfigError(f"fraction {v} outside (0, 1)")
        return v
    if axis == "iou_band":
        lo, hi = (float(x) for x in (value.split(",") if isinstance(value, str) else value))
        if not 0 <= lo < hi <= 1:
            raise ConfigError(f"IoU band [{lo}, {hi}] is not a valid interval")
        return (lo, hi)
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def _label(value) -> str:
    return "-".join(f"{v:g}" for v in value) if isinstance(value, tuple) else (f"{value:g}" if isinstance(value, float) else str(value))


def run_ablation(
    config: ExperimentConfig,
    axis: str,
    values: Sequence,
    workdir,
    *,
    seeds: Sequence[int] = (0, 1, 2),
    csv_path=None,
    force: bool = False,
    jobs: int = 1,
) -> list[dict]:
    """Re-run the pipeline per axis value and seed; upstream stages shared where the axis allows.

    The fraction axis evaluates every value on the held-out frames of the
    largest fraction so that all rows see the same test set.
    """
    parsed = [_parse_value(axis, v) for v in values]
    if not parsed:
        raise ConfigError("ablation needs at least one value")
    base = Workspace(workdir)
    for stage in ("genworld", "segment"):
        run_stage(stage, config, base, force=force, jobs=jobs)
    rows = []
    for value in parsed:
        scores = []
        for seed in seeds:
            cfg = _seeded(config, seed)
            if axis == "strategy":
                cfg = cfg.with_overrides(**{"sampling.strategy": value})
                shared = ("genworld", "segment", "pair-select", "match-regions")
            elif axis == "iou_band":
                cfg = cfg.with_overrides(**{"pairing.iou_l": value[0], "pairing.iou_h": value[1]})
                shared = ("genworld", "segment")
            else:
                cfg = cfg.with_overrides(**{"supervise.fraction": value, "supervise.eval_fraction": max(parsed)})
                shared = ("genworld", "segment", "pair-select", "match-regions")
            ws = base.derive(Path(workdir) / "ablate" / axis / _label(value) / f"seed{seed}", shared)
            if axis == "fraction":
                # pre-training does not depend on the fraction: one run per seed
                per_seed = Path(workdir) / "ablate" / axis / "shared" / f"seed{seed}"
                ws.overrides["sample-pairs"] = per_seed / "sample-pairs"
                ws.overrides["pretrain"] = per_seed / "pretrain"
            run_all(cfg, ws, force=force, jobs=jobs)
            scores.append(read_report(ws)["miou"])
        rows.append({"value": _label(value), "miou": scores, "mean": float(np.mean(scores))})
    if csv_path is not None:
        write_ablation_csv(rows, seeds, csv_path)
    return rows


def _seeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return config.with_overrides(**{"sampling.seed": seed, "ssl.seed": seed, "supervise.seed": seed})


def write_ablation_csv(rows, seeds, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", *(f"miou_seed{s}" for s in seeds), "mean"])
        for r in rows:
            w.writerow([r["value"], *(f"{m:.6f}" for m in r["miou"]), f"{r['mean']:.6f}"])

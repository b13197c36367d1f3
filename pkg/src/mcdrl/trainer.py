"""Training loop, progressive intervention schedule, ablations, checkpoints.

The optimizer is Adam with decoupled weight decay. The causal intervention
path is bypassed (identity) for the first ceil(activation_fraction * epochs)
epochs and its loss weight is zero while bypassed; afterwards both switch on.
Four ablation modes mirror the study grid: full, no_mtrs (keep every cell),
no_cdrl (identity intervention), baseline (plain encoder + decoder,
segmentation loss only).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import tensor as nc
from .benchdata import Dataset, load_dataset
from .cdrl import attend_rows, pixel_to_cell_index
from .encoders import extract_patches
from .io import read_checkpoint, write_checkpoint
from .mtrs import top_rows
from .objectives import (LossConfig, MetricsAccumulator, MetricsReport, contrast_rows,
                         seg_loss, total_loss)
from .pipeline import SegmentationModel
from .tensor import Tape, Tensor, backward

ABLATION_MODES = ("full", "no_mtrs", "no_cdrl", "baseline")


class TrainingError(RuntimeError):
    """Training aborted; diagnostics are dumped next to the run outputs."""


@dataclass
class TrainConfig:
    epochs: int = 10
    activation_fraction: float = 0.2
    lr: float = 0.005
    weight_decay: float = 0.01
    batch_size: int = 16
    alpha: float = 0.3
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: str = "full"
    seed: int = 0
    embed_dim: int = 16
    patch_size: int = 4
    entries_trainable: bool = False

    def __post_init__(self):
        if not 0.0 <= self.activation_fraction < 1.0:
            raise ValueError("activation_fraction must be in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"ablation must be one of {ABLATION_MODES}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def resolved(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def activation_epoch(cfg: TrainConfig) -> int:
    return math.ceil(cfg.activation_fraction * cfg.epochs)


def mode_settings(cfg: TrainConfig) -> tuple[float, bool, float]:
    """(effective alpha, whether the intervention path is used, effective lambda2)."""
    if cfg.ablation == "full":
        return cfg.alpha, True, cfg.loss.lambda2
    if cfg.ablation == "no_mtrs":
        return 1.0, True, cfg.loss.lambda2
    if cfg.ablation == "no_cdrl":
        return cfg.alpha, False, cfg.loss.lambda2
    return 1.0, False, 0.0  # baseline


class AdamW:
    """Adam with decoupled weight decay applied directly to the parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], int]:
        return ({n: a.copy() for n, a in self._m.items()},
                {n: a.copy() for n, a in self._v.items()}, self.step_count)

    def load_state(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray],
                   step_count: int) -> None:
        for name in self.params:
            self._m[name] = np.asarray(m[name], dtype=np.float64).copy()
            self._v[name] = np.asarray(v[name], dtype=np.float64).copy()
        self.step_count = int(step_count)


# ---------------------------------------------------------------------------
# data preparation and the batched forward pass

@dataclass
class PreparedData:
    patches: np.ndarray  # (n, n_cells, patch_dim)
    labels: np.ndarray  # (n, n_pixels)
    class_ids: np.ndarray  # (n,)
    domains: list[str]
    grid_h: int
    grid_w: int
    pixel_map: np.ndarray  # pixel index -> cell index for one sample
    seeds: np.ndarray


def prepare(dataset: Dataset, patch_size: int) -> PreparedData:
    if len(dataset) == 0:
        raise ValueError("empty dataset split")
    if dataset.height % patch_size or dataset.width % patch_size:
        raise ValueError(
            f"dataset dims {dataset.height}x{dataset.width} not divisible by patch "
            f"size {patch_size}")
    grid_h = dataset.height // patch_size
    grid_w = dataset.width // patch_size
    patches = np.stack([extract_patches(s.image, patch_size) for s in dataset.samples])
    labels = np.stack([s.labels.reshape(-1) for s in dataset.samples])
    return PreparedData(
        patches=patches, labels=labels,
        class_ids=np.asarray([s.class_id for s in dataset.samples]),
        domains=[s.domain for s in dataset.samples],
        grid_h=grid_h, grid_w=grid_w,
        pixel_map=pixel_to_cell_index(grid_h, grid_w, patch_size),
        seeds=np.asarray([s.seed for s in dataset.samples]))


def _forward(model: SegmentationModel, flat_patches: Tensor, batch: int, *,
             alpha: float, intervene_active: bool) -> SimpleNamespace:
    """Batched pipeline forward over ``batch`` samples stacked row-wise."""
    n_cells = flat_patches.shape[0] // batch
    feats = model.vision.encode_patch_rows(flat_patches)
    if alpha < 1.0:
        fd = feats.data
        norms = np.sqrt((fd * fd).sum(axis=1, keepdims=True))
        if (norms <= nc.NORM_EPS).any():
            raise nc.DegenerateVectorError("zero-norm feature row during selection")
        sims = (fd / norms) @ model.class_embeds.data.T
        scores = sims.max(axis=1).reshape(batch, n_cells)
        selected = top_rows(scores, alpha)
    else:
        selected = np.broadcast_to(np.arange(n_cells), (batch, n_cells))
    flat_idx = (selected + np.arange(batch)[:, None] * n_cells).reshape(-1)
    region_rows = nc.gather_rows(feats, flat_idx)
    if intervene_active:
        mixed_rows, attn = attend_rows(region_rows, model.dictionary)
        grid_feats = nc.row_splice(feats, mixed_rows, flat_idx)
        intervened = mixed_rows
    else:
        grid_feats = feats
        intervened = region_rows
        attn = None
    probs = nc.softmax_rows(model.decoder.logits(grid_feats))
    return SimpleNamespace(feats=feats, probs=probs, intervened=intervened,
                           n_selected=selected.shape[1], attention=attn,
                           n_cells=n_cells, batch=batch)


def predict_labels(model: SegmentationModel, prep: PreparedData, indices: np.ndarray, *,
                   alpha: float, intervene_active: bool) -> np.ndarray:
    """Per-pixel argmax labels for the given samples; runs untaped."""
    batch = len(indices)
    flat_patches = Tensor(prep.patches[indices].reshape(batch * prep.grid_h * prep.grid_w, -1))
    fwd = _forward(model, flat_patches, batch, alpha=alpha,
                   intervene_active=intervene_active)
    p = model.patch_size
    cells = fwd.probs.data.argmax(axis=1).reshape(batch, prep.grid_h, prep.grid_w)
    return np.repeat(np.repeat(cells, p, axis=1), p, axis=2)


def _batch_losses(model: SegmentationModel, prep: PreparedData, indices: np.ndarray,
                  cfg_eff: LossConfig, *, alpha: float, intervene_active: bool):
    batch = len(indices)
    n_cells = prep.grid_h * prep.grid_w
    flat_patches = Tensor(prep.patches[indices].reshape(batch * n_cells, -1))
    fwd = _forward(model, flat_patches, batch, alpha=alpha,
                   intervene_active=intervene_active)

    pix_idx = (prep.pixel_map[None, :] + np.arange(batch)[:, None] * n_cells).reshape(-1)
    pixel_probs = nc.gather_rows(fwd.probs, pix_idx)
    l_seg = seg_loss(pixel_probs, prep.labels[indices].reshape(-1))

    class_ids = prep.class_ids[indices]
    l_causal = None
    if cfg_eff.lambda1 > 0.0:
        d = model.embed_dim
        pooled = nc.reduce(nc.reshape(fwd.intervened, (batch, fwd.n_selected, d)),
                           "mean", axis=1)
        targets = Tensor(model.class_domain_table.mean_embeds[class_ids - 1])
        diff = nc.sub(pooled, targets)
        l_causal = nc.reduce(nc.reduce(nc.mul(diff, diff), "sum", axis=1), "mean")

    l_contrast = None
    if cfg_eff.lambda2 > 0.0:
        pooled_img = nc.reduce(nc.reshape(fwd.feats, (batch, n_cells, model.embed_dim)),
                               "mean", axis=1)
        l_contrast = contrast_rows(pooled_img, model.class_embeds, class_ids, cfg_eff.tau)

    total = total_loss(l_seg, l_causal, l_contrast, cfg_eff)
    return total, l_seg, l_causal, l_contrast


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    epoch: int  # completed epochs
    rng_state: dict
    config: dict
    config_hash: str

    def save(self, path) -> None:
        tensors: dict[str, np.ndarray] = {}
        for name, arr in self.params.items():
            tensors[f"param.{name}"] = arr
        for name, arr in self.adam_m.items():
            tensors[f"adam_m.{name}"] = arr
        for name, arr in self.adam_v.items():
            tensors[f"adam_v.{name}"] = arr
        meta = {"kind": "mcdrl-checkpoint", "epoch": self.epoch,
                "adam_step": self.adam_step, "rng_state": self.rng_state,
                "config": self.config, "config_hash": self.config_hash}
        write_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = read_checkpoint(path)
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for key, arr in tensors.items():
            prefix, name = key.split(".", 1)
            groups[prefix][name] = arr
        return cls(params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
                   adam_step=meta["adam_step"], epoch=meta["epoch"],
                   rng_state=meta["rng_state"], config=meta["config"],
                   config_hash=meta["config_hash"])


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    raw["loss"] = LossConfig(**raw["loss"])
    return TrainConfig(**raw)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[SegmentationModel, TrainConfig]:
    cfg = config_from_dict(ckpt.config)
    model = SegmentationModel(embed_dim=cfg.embed_dim, patch_size=cfg.patch_size,
                              seed=cfg.seed, entries_trainable=cfg.entries_trainable)
    model.load_state(ckpt.params)
    return model, cfg


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    model: SegmentationModel


def _dump_diagnostics(out_dir, payload: dict) -> Path:
    target = Path(out_dir) if out_dir else Path.cwd()
    target.mkdir(parents=True, exist_ok=True)
    path = target / "nan_dump.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def train(cfg: TrainConfig, dataset: Dataset, *, resume: Checkpoint | None = None,
          out_dir=None, eval_set: Dataset | None = None, eval_every: int = 0,
          stop_after: int | None = None) -> TrainResult:
    """Optimize the pipeline on ``dataset``; deterministic under (config, seed).

    ``stop_after`` interrupts the run after that many completed epochs while
    keeping the full config (and so the schedule and config hash) intact; the
    returned checkpoint resumes the remaining epochs exactly.
    """
    prep = prepare(dataset, cfg.patch_size)
    model = SegmentationModel(embed_dim=cfg.embed_dim, patch_size=cfg.patch_size,
                              seed=cfg.seed, entries_trainable=cfg.entries_trainable)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([0x7421, cfg.seed]))
    cfg_hash = cfg.config_hash()

    start_epoch = 0
    if resume is not None:
        if resume.config_hash != cfg_hash:
            raise ValueError("checkpoint config does not match the requested config")
        model.load_state(resume.params)
        opt.load_state(resume.adam_m, resume.adam_v, resume.adam_step)
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    alpha_eff, uses_cdrl, lambda2_eff = mode_settings(cfg)
    act_epoch = activation_epoch(cfg)
    n = len(dataset)
    history: list[dict] = []
    end_epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)

    for epoch in range(start_epoch, end_epoch):
        active = uses_cdrl and epoch >= act_epoch
        lambda1_eff = cfg.loss.lambda1 if active else 0.0
        cfg_eff = LossConfig(lambda1=lambda1_eff, lambda2=lambda2_eff, tau=cfg.loss.tau)
        perm = rng.permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            try:
                with Tape():
                    total, l_seg, l_causal, l_contrast = _batch_losses(
                        model, prep, idx, cfg_eff, alpha=alpha_eff,
                        intervene_active=active)
                    if not np.isfinite(total.data).all():
                        raise nc.NumericError("non-finite total loss")
                    backward(total)
            except nc.NumericError as exc:
                dump = _dump_diagnostics(out_dir, {
                    "error": str(exc), "epoch": epoch, "batch_start": int(lo),
                    "sample_indices": [int(i) for i in idx],
                    "sample_seeds": [int(s) for s in prep.seeds[idx]],
                })
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; diagnostics in {dump}") from exc
            opt.step()
            opt.zero_grad()
            sums += (total.item(), l_seg.item(),
                     l_causal.item() if l_causal is not None else 0.0,
                     l_contrast.item() if l_contrast is not None else 0.0)
            n_batches += 1
        record = {
            "epoch": epoch, "intervention_active": bool(active),
            "lambda1_effective": lambda1_eff,
            "loss_total": sums[0] / n_batches, "loss_seg": sums[1] / n_batches,
            "loss_causal": sums[2] / n_batches, "loss_contrast": sums[3] / n_batches,
        }
        if eval_set is not None and eval_every and (epoch + 1) % eval_every == 0:
            rep = evaluate_model(model, eval_set, alpha=alpha_eff, intervene_active=active)
            record["eval_mean_dice"] = rep.mean_dice
            record["eval_acc"] = rep.acc
        history.append(record)

    adam_m, adam_v, adam_step = opt.state_arrays()
    ckpt = Checkpoint(params=model.state(), adam_m=adam_m, adam_v=adam_v,
                      adam_step=adam_step, epoch=end_epoch,
                      rng_state=rng.bit_generator.state, config=cfg.resolved(),
                      config_hash=cfg_hash)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(out / "checkpoint.mckp")
        with open(out / "history.jsonl", "w", encoding="utf-8") as f:
            for record in history:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return TrainResult(checkpoint=ckpt, history=history, model=model)


# ---------------------------------------------------------------------------
# evaluation

def evaluate_model(model: SegmentationModel, dataset: Dataset, *, alpha: float,
                   intervene_active: bool, chunk: int = 64) -> MetricsReport:
    """Pure evaluation: per-class Dice/IoU and pixel accuracy, grouped by site."""
    prep = prepare(dataset, model.patch_size)
    if dataset.n_classes != model.n_classes:
        raise ValueError(
            f"dataset has {dataset.n_classes} classes, model expects {model.n_classes}")
    acc = MetricsAccumulator(dataset.n_classes)
    h, w = dataset.height, dataset.width
    for lo in range(0, len(dataset), chunk):
        idx = np.arange(lo, min(lo + chunk, len(dataset)))
        preds = predict_labels(model, prep, idx, alpha=alpha,
                               intervene_active=intervene_active)
        for j, i in enumerate(idx):
            acc.add(preds[j], prep.labels[i].reshape(h, w), prep.domains[i])
    return acc.report()


def eval_regime(cfg: TrainConfig, completed_epochs: int) -> tuple[float, bool]:
    """(alpha, intervention flag) matching the regime of the last trained epoch."""
    alpha_eff, uses_cdrl, _ = mode_settings(cfg)
    return alpha_eff, uses_cdrl and completed_epochs > activation_epoch(cfg)


def evaluate(ckpt: Checkpoint, dataset: Dataset) -> MetricsReport:
    """Evaluate a checkpoint on a split without mutating anything."""
    model, cfg = model_from_checkpoint(ckpt)
    alpha_eff, active = eval_regime(cfg, ckpt.epoch)
    return evaluate_model(model, dataset, alpha=alpha_eff, intervene_active=active)


# ---------------------------------------------------------------------------
# ablation harness

@dataclass
class AblationResult:
    sites: list[str]
    modes: list[str]
    seeds: list[int]
    cells: dict[str, dict[str, float]]  # mode -> site -> mean mDice (percent)
    per_seed: dict[str, dict[str, list[float]]]
    averages: dict[str, float]
    elapsed_seconds: float

    def to_dict(self) -> dict:
        return {"sites": self.sites, "modes": self.modes, "seeds": self.seeds,
                "cells": self.cells, "per_seed": self.per_seed,
                "averages": self.averages, "elapsed_seconds": self.elapsed_seconds}


def render_table(result: AblationResult) -> str:
    width = max(len(m) for m in result.modes) + 2
    header = "mode".ljust(width) + "".join(s.rjust(8) for s in result.sites) + "    avg"
    lines = [header, "-" * len(header)]
    for mode in result.modes:
        row = mode.ljust(width)
        row += "".join(f"{result.cells[mode][s]:8.2f}" for s in result.sites)
        row += f"{result.averages[mode]:7.2f}"
        lines.append(row)
    return "\n".join(lines)


def run_cell(cfg: TrainConfig, dataset: Dataset, mode: str, site: str,
             seed: int) -> float:
    """Train one (mode, site, seed) cell and return held-out mDice in percent."""
    cell_cfg = replace(cfg, ablation=mode, seed=seed)
    train_set, test_set = dataset.holdout(site)
    result = train(cell_cfg, train_set)
    alpha_eff, active = eval_regime(cell_cfg, cell_cfg.epochs)
    report = evaluate_model(result.model, test_set, alpha=alpha_eff,
                            intervene_active=active)
    return report.mean_dice * 100.0


_WORKER_CACHE: dict[str, Dataset] = {}


def _cell_worker(args: tuple) -> tuple[str, str, int, float]:
    cfg_raw, data_dir, mode, site, seed = args
    dataset = _WORKER_CACHE.get(data_dir)
    if dataset is None:
        dataset = load_dataset(data_dir)
        _WORKER_CACHE[data_dir] = dataset
    cfg = config_from_dict(cfg_raw)
    return mode, site, seed, run_cell(cfg, dataset, mode, site, seed)


def ablate(cfg: TrainConfig, dataset: Dataset, seeds: list[int],
           modes: tuple[str, ...] = ABLATION_MODES, jobs: int = 1,
           dataset_dir=None, log=None) -> AblationResult:
    """Leave-one-domain-out grid over modes, sites and seeds."""
    sites = list(dataset.domains)
    tasks = [(mode, site, seed) for mode in modes for site in sites for seed in seeds]
    started = time.perf_counter()
    results: dict[tuple[str, str, int], float] = {}
    if jobs > 1 and dataset_dir is not None:
        from concurrent.futures import ProcessPoolExecutor

        args = [(cfg.resolved(), str(dataset_dir), m, s, sd) for m, s, sd in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for mode, site, seed, value in pool.map(_cell_worker, args):
                results[(mode, site, seed)] = value
                if log:
                    log(f"{mode}/{site}/seed{seed}: {value:.2f}")
    else:
        for mode, site, seed in tasks:
            results[(mode, site, seed)] = run_cell(cfg, dataset, mode, site, seed)
            if log:
                log(f"{mode}/{site}/seed{seed}: {results[(mode, site, seed)]:.2f}")

    cells = {m: {s: float(np.mean([results[(m, s, sd)] for sd in seeds])) for s in sites}
             for m in modes}
    per_seed = {m: {s: [results[(m, s, sd)] for sd in seeds] for s in sites} for m in modes}
    averages = {m: float(np.mean(list(cells[m].values()))) for m in modes}
    return AblationResult(sites=sites, modes=list(modes), seeds=list(seeds), cells=cells,
                          per_seed=per_seed, averages=averages,
                          elapsed_seconds=time.perf_counter() - started)

"""Prune/finetune schedules: IMP, PARP, PARP-P, with optional distillation and self-labelled data."""

import csv
import enum
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import toy
from .params import ParamStore, save_checkpoint
from .pruner import PruneMask, apply_mask, mask_overlap, save_mask, sparsity, ump
from .toy import SynthDataset, ToyModel, TrainOptions

log = logging.getLogger(__name__)


class Kind(str, enum.Enum):
    IMP = "IMP"
    PARP = "PARP"
    PARP_P = "PARP_P"


class Init(str, enum.Enum):
    TRAINED = "TRAINED"
    RANDOM = "RANDOM"


class Aug(str, enum.Enum):
    NONE = "NONE"
    SEQ_AUG = "SEQ_AUG"
    MIX_AUG = "MIX_AUG"


@dataclass
class ScheduleConfig:
    kind: Kind = Kind.PARP
    target_sparsity: float = 0.5
    # updates between re-prune events; None means one epoch of the training set
    n_updates: Optional[int] = None
    imp_iterations: int = 1
    # None means max(0, target - 0.2)
    parp_p_start: Optional[float] = None
    parp_p_events: int = 5
    init: Init = Init.TRAINED
    kd_weight: float = 0.0
    aug: Aug = Aug.NONE
    seed: int = 0
    lr: float = 0.2
    # finetuning updates per training phase (per IMP iteration, per seq-aug stage)
    steps: int = 800
    batch_size: int = 32
    # re-prune right after the N-th update, or right before it
    reprune: str = "after"

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.init = Init(self.init)
        self.aug = Aug(self.aug)
        if not (0 <= self.target_sparsity < 1):
            raise ValueError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        if self.n_updates is not None and self.n_updates < 1:
            raise ValueError("n_updates must be >= 1")
        if self.imp_iterations < 1 or self.parp_p_events < 1 or self.steps < 1:
            raise ValueError("imp_iterations, parp_p_events and steps must be >= 1")
        if not (0 <= self.start_sparsity <= self.target_sparsity):
            raise ValueError("need 0 <= parp_p_start <= target_sparsity")
        if self.kd_weight < 0:
            raise ValueError("kd_weight must be >= 0")
        if self.reprune not in ("after", "before"):
            raise ValueError("reprune must be 'after' or 'before'")

    @property
    def start_sparsity(self):
        if self.parp_p_start is None:
            return max(0.0, self.target_sparsity - 0.2)
        return self.parp_p_start

    def train_options(self):
        return TrainOptions(lr=self.lr, steps=self.steps, batch_size=self.batch_size, seed=self.seed)

    def to_json(self):
        d = asdict(self)
        for k in ("kind", "init", "aug"):
            d[k] = d[k].value
        return d


@dataclass
class PrunedResult:
    final_mask: PruneMask
    final_weights: ParamStore
    initial_mask: PruneMask
    loss_curve: List[tuple]
    mask_overlap_m0_mD: float
    final_loss: float
    model: ToyModel
    event_sparsities: List[float] = field(default_factory=list)
    # (step, max |w| over masked coordinates), recorded for IMP
    masked_max: List[tuple] = field(default_factory=list)

    def save(self, directory):
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.final_weights, out / "weights.prnt")
        save_mask(self.final_mask, out / "final_mask.prnt")
        save_mask(self.initial_mask, out / "initial_mask.prnt")
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for step, value in self.loss_curve:
                w.writerow([step, repr(float(value))])
        summary = {
            "final_loss": self.final_loss,
            "final_sparsity": sparsity(self.final_mask),
            "mask_overlap_m0_mD": self.mask_overlap_m0_mD,
            "event_sparsities": self.event_sparsities,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


@dataclass
class DistillationTarget:
    """Frozen teacher outputs for one dataset, paired with the loss weight."""

    frames: List[np.ndarray]
    weight: float


def attach_kd(cfg: ScheduleConfig, teacher: ToyModel, dataset: SynthDataset) -> Optional[DistillationTarget]:
    """Precompute teacher frames so training minimises L_data + weight * MSE(pred, teacher)."""
    if cfg.kd_weight < 0:
        raise ValueError("kd_weight must be >= 0")
    if cfg.kd_weight == 0:
        return None
    preds = toy.forward_many(teacher, dataset.inputs)
    return DistillationTarget([p.frames for p in preds], cfg.kd_weight)


def _initial_model(model: ToyModel, cfg: ScheduleConfig) -> ToyModel:
    if cfg.init is Init.TRAINED:
        return model
    fresh = toy.init_model(model.K, model.H, model.D, model.r, seed=cfg.seed)
    return fresh.with_params(ParamStore(fresh.params.entries, model.params.prunable))


def _train(model, dataset, cfg, grad_mask=None, kd=None, on_step=None):
    return toy.train(
        model,
        dataset,
        cfg.train_options(),
        grad_mask,
        kd_frames=kd.frames if kd else None,
        kd_weight=kd.weight if kd else 0.0,
        on_step=on_step,
    )


def imp_sparsities(target, iterations):
    """Per-iteration sparsity, pruning the same fraction of survivors each round."""
    levels = [1.0 - (1.0 - target) ** (i / iterations) for i in range(1, iterations)]
    return levels + [target]


def run_imp(model: ToyModel, dataset: SynthDataset, cfg: ScheduleConfig, teacher=None) -> PrunedResult:
    """Prune, then train with pruned coordinates frozen at zero; optionally repeated."""
    if cfg.kind is not Kind.IMP:
        raise ValueError(f"run_imp needs kind IMP, got {cfg.kind.value}")
    current = _initial_model(model, cfg)
    kd = attach_kd(cfg, teacher or model, dataset)
    curve, masked_max = [], []
    mask = first_mask = None
    levels = imp_sparsities(cfg.target_sparsity, cfg.imp_iterations)
    for it, level in enumerate(levels):
        mask = ump(current.params, level, fixed=mask)
        if first_mask is None:
            first_mask = mask
        current = current.with_params(apply_mask(current.params, mask))
        pruned = {n: ~mask[n] for n in mask.names()}
        offset = it * cfg.steps

        def watch(step, params, pruned=pruned, offset=offset):
            worst = max((float(np.abs(params[n][z]).max(initial=0.0)) for n, z in pruned.items()), default=0.0)
            masked_max.append((offset + step, worst))
            if worst != 0.0:
                raise RuntimeError(f"masked weight moved to {worst} at step {offset + step}")

        current, c = _train(current, dataset, cfg, grad_mask=mask, kd=kd, on_step=watch)
        curve.extend((offset + s, v) for s, v in c)
    final = apply_mask(current.params, mask)
    final_model = current.with_params(final)
    return PrunedResult(
        final_mask=mask,
        final_weights=final,
        initial_mask=first_mask,
        loss_curve=curve,
        mask_overlap_m0_mD=mask_overlap(first_mask, mask),
        final_loss=toy.dataset_loss(final_model, dataset),
        model=final_model,
        event_sparsities=levels,
        masked_max=masked_max,
    )


def ramp_sparsities(start, target, events):
    """Linear ramp from ``start`` to ``target`` over ``events`` re-prune events."""
    if events == 1:
        return [target]
    return [start + (target - start) * i / (events - 1) for i in range(events - 1)] + [target]


def _prune_adjust_reprune(theta0: ToyModel, dataset: SynthDataset, cfg: ScheduleConfig, levels, kd):
    """Prune at levels[0], train with all weights live, re-prune every N updates, prune at the end.

    Event ``i`` (i >= 1) happens at update ``i * N`` and prunes to
    ``levels[min(i, len(levels) - 1)]``. Intermediate re-prunes zero the
    weights but leave them trainable.
    """
    N = cfg.n_updates or toy.steps_per_epoch(len(dataset), cfg.batch_size)
    m0 = ump(theta0.params, levels[0])
    start = theta0.with_params(apply_mask(theta0.params, m0))
    prunable = theta0.params.prunable
    used = [levels[0]]
    shift = 0 if cfg.reprune == "after" else 1

    def reprune(step, params):
        if (step + shift) % N:
            return
        i = (step + shift) // N
        level = levels[min(i, len(levels) - 1)]
        m = ump(ParamStore(params, prunable), level)
        for n in m.names():
            params[n] = params[n] * m[n]
        used.append(level)

    trained, curve = _train(start, dataset, cfg, kd=kd, on_step=reprune)
    mD = ump(trained.params, cfg.target_sparsity)
    final = apply_mask(trained.params, mD)
    return m0, mD, final, curve, used


def _parp_levels(cfg: ScheduleConfig):
    if cfg.kind is Kind.PARP_P:
        return ramp_sparsities(cfg.start_sparsity, cfg.target_sparsity, cfg.parp_p_events)
    return [cfg.target_sparsity]


def _result(model, m0, mD, final, curve, dataset, levels):
    final_model = model.with_params(final)
    return PrunedResult(
        final_mask=mD,
        final_weights=final,
        initial_mask=m0,
        loss_curve=curve,
        mask_overlap_m0_mD=mask_overlap(m0, mD),
        final_loss=toy.dataset_loss(final_model, dataset),
        model=final_model,
        event_sparsities=levels,
    )


def run_parp(model: ToyModel, dataset: SynthDataset, cfg: ScheduleConfig, teacher=None) -> PrunedResult:
    if cfg.kind is not Kind.PARP:
        raise ValueError(f"run_parp needs kind PARP, got {cfg.kind.value}")
    theta0 = _initial_model(model, cfg)
    kd = attach_kd(cfg, teacher or model, dataset)
    m0, mD, final, curve, used = _prune_adjust_reprune(theta0, dataset, cfg, _parp_levels(cfg), kd)
    return _result(theta0, m0, mD, final, curve, dataset, used)


def run_parp_p(model: ToyModel, dataset: SynthDataset, cfg: ScheduleConfig, teacher=None) -> PrunedResult:
    """PARP whose re-prune events ramp linearly from ``start_sparsity`` up to the target."""
    if cfg.kind is not Kind.PARP_P:
        raise ValueError(f"run_parp_p needs kind PARP_P, got {cfg.kind.value}")
    theta0 = _initial_model(model, cfg)
    kd = attach_kd(cfg, teacher or model, dataset)
    m0, mD, final, curve, used = _prune_adjust_reprune(theta0, dataset, cfg, _parp_levels(cfg), kd)
    return _result(theta0, m0, mD, final, curve, dataset, used)


def run_with_aug(
    model: ToyModel,
    dataset: SynthDataset,
    unspoken: Sequence,
    cfg: ScheduleConfig,
    teacher: Optional[ToyModel] = None,
) -> PrunedResult:
    """PARP finetuning with extra pairs labelled by the dense teacher.

    SEQ_AUG runs the prune-adjust-re-prune phase on the self-labelled set
    first, then on the real set starting from that subnetwork. MIX_AUG runs it
    once on the union.
    """
    if cfg.aug is Aug.NONE:
        raise ValueError("run_with_aug needs aug SEQ_AUG or MIX_AUG")
    if cfg.kind is Kind.IMP:
        raise ValueError("augmentation policies apply to PARP / PARP_P")
    teacher = teacher or model
    levels = _parp_levels(cfg)
    theta0 = _initial_model(model, cfg)

    if cfg.aug is Aug.MIX_AUG:
        mixed = dataset
        if len(unspoken):
            mixed = dataset.concat(toy.synthesize_labels(teacher, unspoken, dataset.codebook))
        kd = attach_kd(cfg, teacher, mixed)
        m0, mD, final, curve, used = _prune_adjust_reprune(theta0, mixed, cfg, levels, kd)
        return _result(theta0, m0, mD, final, curve, dataset, used)

    if not len(unspoken):
        raise ValueError("SEQ_AUG needs a non-empty unspoken set")
    synth = toy.synthesize_labels(teacher, unspoken, dataset.codebook)
    m0, mU, wU, curve_u, used_u = _prune_adjust_reprune(theta0, synth, cfg, levels, attach_kd(cfg, teacher, synth))
    stage2 = theta0.with_params(wU)
    _, mD, final, curve_d, used_d = _prune_adjust_reprune(
        stage2, dataset, cfg, [cfg.target_sparsity], attach_kd(cfg, teacher, dataset)
    )
    offset = len(curve_u)
    curve = curve_u + [(offset + s, v) for s, v in curve_d]
    return _result(theta0, m0, mD, final, curve, dataset, used_u + used_d)


def run_schedule(model, dataset, cfg: ScheduleConfig, unspoken=None, teacher=None) -> PrunedResult:
    if cfg.aug is not Aug.NONE:
        return run_with_aug(model, dataset, unspoken or [], cfg, teacher)
    runner = {Kind.IMP: run_imp, Kind.PARP: run_parp, Kind.PARP_P: run_parp_p}[cfg.kind]
    return runner(model, dataset, cfg, teacher)


def with_kind(cfg: ScheduleConfig, kind) -> ScheduleConfig:
    return replace(cfg, kind=Kind(kind))

"""Sparsity sweeps on the toy task: one baseline per seed, then every (schedule, sparsity, seed) job.

Output directory layout::

    config.json          resolved config
    results.csv          one row per job, see RESULT_COLUMNS
    baselines.csv        dense baseline metrics per seed
    timings.csv          wall-clock seconds per job (not reproducible, hence separate)
    baselines/seed<S>.prnt
    runs/<schedule>/s<sparsity>/seed<S>/   per-run artifacts (when save_artifacts)
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

from . import toy
from .params import load_checkpoint, save_checkpoint
from .schedules import Aug, Init, Kind, ScheduleConfig, run_schedule

log = logging.getLogger(__name__)

ACOUSTIC_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)
VOCODER_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.88)
NAMED_GRIDS = {"acoustic": ACOUSTIC_GRID, "vocoder": VOCODER_GRID}

RESULT_COLUMNS = ("schedule", "sparsity", "seed", "status", "final_loss", "toy_wer", "mask_overlap_m0_mD")
BASELINE_COLUMNS = ("seed", "initial_loss", "final_loss", "toy_wer")
TIMING_COLUMNS = ("schedule", "sparsity", "seed", "duration_s")

DEFAULT_OUT_DIR = "ttsprune_out"


@dataclass
class SweepConfig:
    grid: Union[str, List[float]] = "acoustic"
    kinds: List[str] = field(default_factory=lambda: ["IMP", "PARP", "PARP_P"])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    # toy model and data
    K: int = 16
    H: int = 32
    D: int = 8
    r: int = 2
    n_pairs: int = 512
    min_len: int = 4
    max_len: int = 12
    n_heldout: int = 128
    prune_embedding: bool = True
    # dense baseline training
    baseline_lr: float = 0.1
    baseline_steps: int = 2000
    # pruning schedules
    lr: float = 0.2
    steps: int = 800
    batch_size: int = 32
    n_updates: Optional[int] = None
    imp_iterations: int = 1
    parp_p_events: int = 5
    parp_p_start: Optional[float] = None
    init: str = "TRAINED"
    kd_weight: float = 0.0
    aug: str = "NONE"
    n_unspoken: int = 0
    # execution
    out_dir: Optional[str] = None
    parallelism: int = 1
    save_artifacts: bool = True

    def __post_init__(self):
        g = self.sparsities
        if not g:
            raise ValueError("sparsity grid is empty")
        if any(not 0 <= s < 1 for s in g):
            raise ValueError(f"grid values must lie in [0, 1): {g}")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError(f"grid must be strictly increasing: {g}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("duplicate seeds")
        if not self.kinds:
            raise ValueError("kinds must be non-empty")
        self.kinds = [Kind(k).value for k in self.kinds]
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError("duplicate schedule kinds")
        Init(self.init)
        Aug(self.aug)
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.n_pairs < 1 or self.n_heldout < 1:
            raise ValueError("n_pairs and n_heldout must be >= 1")

    @property
    def sparsities(self) -> List[float]:
        if isinstance(self.grid, str):
            if self.grid not in NAMED_GRIDS:
                raise ValueError(f"unknown grid {self.grid!r}; use one of {sorted(NAMED_GRIDS)} or a list")
            return list(NAMED_GRIDS[self.grid])
        return [float(s) for s in self.grid]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def schedule_config(self, kind, sparsity, seed) -> ScheduleConfig:
        return ScheduleConfig(
            kind=kind,
            target_sparsity=sparsity,
            n_updates=self.n_updates,
            imp_iterations=self.imp_iterations,
            parp_p_start=None if self.parp_p_start is None else min(self.parp_p_start, sparsity),
            parp_p_events=self.parp_p_events,
            init=self.init,
            kd_weight=self.kd_weight,
            aug=self.aug,
            seed=seed,
            lr=self.lr,
            steps=self.steps,
            batch_size=self.batch_size,
        )


@dataclass(frozen=True)
class SweepRow:
    schedule: str
    sparsity: float
    seed: int
    status: str
    final_loss: Optional[float] = None
    toy_wer: Optional[float] = None
    mask_overlap_m0_mD: Optional[float] = None
    duration_s: float = 0.0

    def csv_fields(self):
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [
            self.schedule,
            repr(float(self.sparsity)),
            str(self.seed),
            self.status,
            fmt(self.final_loss),
            fmt(self.toy_wer),
            fmt(self.mask_overlap_m0_mD),
        ]


def datasets(cfg: SweepConfig, seed):
    """Training set, held-out set (same codebook) and unspoken token sequences for one seed."""
    L = (cfg.min_len, cfg.max_len)
    train = toy.gen_dataset(seed, cfg.n_pairs, cfg.K, cfg.D, L, cfg.r)
    heldout = toy.gen_dataset(seed + 1000, cfg.n_heldout, cfg.K, cfg.D, L, cfg.r, codebook=train.codebook)
    unspoken = []
    if cfg.n_unspoken:
        unspoken = toy.gen_dataset(seed + 2000, cfg.n_unspoken, cfg.K, cfg.D, L, cfg.r, codebook=train.codebook).inputs
    return train, heldout, unspoken


def _baseline_path(out: Path, seed):
    return out / "baselines" / f"seed{seed}.prnt"


def _run_dir(out: Path, kind, sparsity, seed):
    return out / "runs" / kind / f"s{sparsity!r}" / f"seed{seed}"


def train_baseline(cfg_json: dict, seed: int, out_dir: str) -> dict:
    """Train the dense model for one seed and save it; returns its metrics."""
    cfg = SweepConfig.from_json(cfg_json)
    train, heldout, _ = datasets(cfg, seed)
    init = toy.init_model(cfg.K, cfg.H, cfg.D, cfg.r, seed=seed, include_embedding=cfg.prune_embedding)
    model, _ = toy.train(init, train, toy.TrainOptions(cfg.baseline_lr, cfg.baseline_steps, cfg.batch_size, seed))
    path = _baseline_path(Path(out_dir), seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, path)
    return {
        "seed": seed,
        "initial_loss": toy.dataset_loss(init, train),
        "final_loss": toy.dataset_loss(model, train),
        "toy_wer": toy.toy_wer(model, heldout),
    }


def run_job(cfg_json: dict, kind: str, sparsity: float, seed: int, out_dir: str) -> SweepRow:
    """One pruning run. Never raises: failures come back as a row with a status message."""
    t0 = time.perf_counter()
    try:
        cfg = SweepConfig.from_json(cfg_json)
        train, heldout, unspoken = datasets(cfg, seed)
        out = Path(out_dir)
        model = toy.ToyModel(load_checkpoint(_baseline_path(out, seed)), cfg.K, cfg.H, cfg.D, cfg.r)
        result = run_schedule(model, train, cfg.schedule_config(kind, sparsity, seed), unspoken=unspoken)
        if cfg.save_artifacts:
            result.save(_run_dir(out, kind, sparsity, seed))
        return SweepRow(
            kind,
            sparsity,
            seed,
            "ok",
            result.final_loss,
            toy.toy_wer(result.model, heldout),
            result.mask_overlap_m0_mD,
            time.perf_counter() - t0,
        )
    except Exception as exc:  # recorded, the sweep goes on
        msg = " ".join(f"{type(exc).__name__}: {exc}".split())
        return SweepRow(kind, sparsity, seed, f"failed: {msg}", duration_s=time.perf_counter() - t0)


def job_keys(cfg: SweepConfig):
    """Jobs in output order: schedule (config order), then sparsity, then seed."""
    return [(k, s, seed) for k in cfg.kinds for s in cfg.sparsities for seed in cfg.seeds]


def _map(fn, arglist, parallelism):
    if parallelism == 1:
        return [fn(*a) for a in arglist]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        futures = [pool.submit(fn, *a) for a in arglist]
        return [f.result() for f in futures]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_sweep(cfg: SweepConfig, out_dir=None) -> List[SweepRow]:
    out = Path(out_dir or cfg.out_dir or DEFAULT_OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = cfg.to_json()
    (out / "config.json").write_text(json.dumps(cfg_json, indent=2, sort_keys=True) + "\n")

    log.info("training %d baselines", len(cfg.seeds))
    baselines = _map(train_baseline, [(cfg_json, s, str(out)) for s in cfg.seeds], cfg.parallelism)
    _write_csv(
        out / "baselines.csv",
        BASELINE_COLUMNS,
        [[b["seed"]] + [repr(float(b[c])) for c in BASELINE_COLUMNS[1:]] for b in baselines],
    )

    keys = job_keys(cfg)
    log.info("running %d jobs with parallelism %d", len(keys), cfg.parallelism)
    rows = _map(run_job, [(cfg_json, k, s, seed, str(out)) for k, s, seed in keys], cfg.parallelism)
    for row in rows:
        if row.status != "ok":
            log.warning("%s s=%r seed=%d %s", row.schedule, row.sparsity, row.seed, row.status)

    _write_csv(out / "results.csv", RESULT_COLUMNS, [r.csv_fields() for r in rows])
    _write_csv(
        out / "timings.csv",
        TIMING_COLUMNS,
        [[r.schedule, repr(float(r.sparsity)), r.seed, f"{r.duration_s:.3f}"] for r in rows],
    )
    return rows


def read_results(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

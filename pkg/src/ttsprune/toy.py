"""Desk-scale token-to-frame model used as a stand-in acoustic model.

Each input token is embedded, mixed with its neighbours by a width-3
convolution, passed through two tanh layers, and projected to ``r`` output
frames of width ``D`` plus ``r`` stop logits. Output length is therefore
``T = r * L``. The synthetic task maps each token to ``r`` copies of its
codebook row; the stop target is 1 on the final frame only.

Gradients are written out by hand (reverse mode over the fixed graph) and
computed in float64; weights are stored as float32.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .params import ParamStore
from .pruner import PruneMask
from .wer import corpus_wer

log = logging.getLogger(__name__)

WEIGHT_NAMES = ("embed", "mix.weight", "hidden1.weight", "hidden2.weight", "head.weight")
BIAS_NAMES = ("mix.bias", "hidden1.bias", "hidden2.bias", "head.bias")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameSeq:
    """``frames`` is T x D. ``stop`` holds logits for model output and 0/1 labels for targets."""

    frames: np.ndarray
    stop: np.ndarray

    @property
    def T(self):
        return self.frames.shape[0]


@dataclass
class SynthDataset:
    inputs: List[np.ndarray]
    targets: List[FrameSeq]
    codebook: np.ndarray
    K: int
    D: int
    r: int
    seed: Optional[int] = None
    length_range: tuple = (1, 1)

    def __len__(self):
        return len(self.inputs)

    def concat(self, other: "SynthDataset") -> "SynthDataset":
        if (self.K, self.D, self.r) != (other.K, other.D, other.r):
            raise ValueError("datasets have different shapes")
        return SynthDataset(
            self.inputs + other.inputs,
            self.targets + other.targets,
            self.codebook,
            self.K,
            self.D,
            self.r,
            self.seed,
            self.length_range,
        )

    def to_json(self):
        return {
            "seed": self.seed,
            "K": self.K,
            "D": self.D,
            "r": self.r,
            "length_range": list(self.length_range),
            "codebook": self.codebook.tolist(),
            "pairs": [
                {"tokens": x.tolist(), "frames": y.frames.tolist(), "stop": y.stop.tolist()}
                for x, y in zip(self.inputs, self.targets)
            ],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            inputs=[np.asarray(p["tokens"], dtype=np.int64) for p in obj["pairs"]],
            targets=[
                FrameSeq(np.asarray(p["frames"], dtype=np.float64), np.asarray(p["stop"], dtype=np.float64))
                for p in obj["pairs"]
            ],
            codebook=np.asarray(obj["codebook"], dtype=np.float64),
            K=obj["K"],
            D=obj["D"],
            r=obj["r"],
            seed=obj["seed"],
            length_range=tuple(obj["length_range"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class ToyModel:
    params: ParamStore
    K: int
    H: int
    D: int
    r: int

    def with_params(self, params: ParamStore) -> "ToyModel":
        return ToyModel(params, self.K, self.H, self.D, self.r)


@dataclass
class TrainOptions:
    lr: float = 0.1
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0


# --------------------------------------------------------------------------
# data


def make_codebook(seed, K, D, min_dist=0.1):
    rng = np.random.default_rng([seed, 0xC0DE])
    while True:
        cb = rng.standard_normal((K, D))
        diff = cb[:, None, :] - cb[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dist[np.diag_indices(K)] = np.inf
        if dist.min() > min_dist:
            return cb


def target_for(tokens, codebook, r) -> FrameSeq:
    frames = np.repeat(codebook[tokens], r, axis=0)
    stop = np.zeros(len(tokens) * r)
    stop[-1] = 1.0
    return FrameSeq(frames, stop)


def gen_dataset(seed, n_pairs, K, D, L_range, r, codebook=None) -> SynthDataset:
    lo, hi = L_range
    if n_pairs < 1 or K < 2 or D < 1 or r < 1 or not (1 <= lo <= hi):
        raise ValueError(f"invalid dataset dimensions n={n_pairs} K={K} D={D} L={L_range} r={r}")
    if codebook is None:
        codebook = make_codebook(seed, K, D)
    elif codebook.shape != (K, D):
        raise ValueError(f"codebook shape {codebook.shape} != {(K, D)}")
    rng = np.random.default_rng([seed, 0xDA7A])
    inputs, targets = [], []
    for _ in range(n_pairs):
        L = int(rng.integers(lo, hi + 1))
        x = rng.integers(0, K, size=L)
        inputs.append(x)
        targets.append(target_for(x, codebook, r))
    return SynthDataset(inputs, targets, codebook, K, D, r, seed, (lo, hi))


# --------------------------------------------------------------------------
# model


def init_model(K=16, H=32, D=8, r=2, seed=0, include_embedding=True) -> ToyModel:
    """Random initialisation: every weight matrix ~ N(0, 1/H), biases zero.

    One scale for all weights keeps global magnitude ranking from wiping out
    a whole layer at moderate sparsity just because of its init.
    """
    rng = np.random.default_rng([seed, 0x1417])
    out = r * (D + 1)
    std = 1.0 / math.sqrt(H)
    entries = {
        "embed": rng.standard_normal((K, H)) * std,
        "mix.weight": rng.standard_normal((H, H, 3)) * std,
        "mix.bias": np.zeros(H),
        "hidden1.weight": rng.standard_normal((H, H)) * std,
        "hidden1.bias": np.zeros(H),
        "hidden2.weight": rng.standard_normal((H, H)) * std,
        "hidden2.bias": np.zeros(H),
        "head.weight": rng.standard_normal((H, out)) * std,
        "head.bias": np.zeros(out),
    }
    prunable = set(WEIGHT_NAMES)
    if not include_embedding:
        prunable.discard("embed")
    return ToyModel(ParamStore(entries, prunable), K, H, D, r)


@dataclass
class Batch:
    tokens: np.ndarray  # (P,)
    left: np.ndarray  # neighbour index into tokens, P means zero padding
    right: np.ndarray
    seq_of: np.ndarray  # sequence id per position
    frame_t: np.ndarray  # (P, r*D)
    stop_t: np.ndarray  # (P, r)
    w_frame: np.ndarray  # (P, 1) per-element MSE weight
    w_stop: np.ndarray  # (P, 1) per-element BCE weight
    kd_frames: Optional[np.ndarray] = None
    n_seqs: int = 1


def _neighbours(lengths):
    P = int(sum(lengths))
    idx = np.arange(P)
    starts = np.repeat(np.cumsum([0] + list(lengths[:-1])), lengths)
    ends = starts + np.repeat(lengths, lengths) - 1
    left = np.where(idx == starts, P, idx - 1)
    right = np.where(idx == ends, P, idx + 1)
    return left, right


def make_batch(tokens_list, targets=None, r=1, D=1, kd_frames=None) -> Batch:
    """Pack sequences into one flat batch; the mean loss weights each sequence equally."""
    if len(tokens_list) == 0:
        raise ValueError("empty batch")
    lengths = np.array([len(t) for t in tokens_list])
    if (lengths < 1).any():
        raise ValueError("sequences must have length >= 1")
    B = len(tokens_list)
    tokens = np.concatenate(tokens_list).astype(np.int64)
    left, right = _neighbours(lengths)
    seq_of = np.repeat(np.arange(B), lengths)
    T = np.repeat(lengths * r, lengths)[:, None].astype(np.float64)
    frame_t = stop_t = None
    if targets is not None:
        frame_t = np.concatenate([t.frames.reshape(-1, r * D) for t in targets])
        stop_t = np.concatenate([t.stop.reshape(-1, r) for t in targets])
    kd = None
    if kd_frames is not None:
        kd = np.concatenate([f.reshape(-1, r * D) for f in kd_frames])
    return Batch(tokens, left, right, seq_of, frame_t, stop_t, 1.0 / (T * D * B), 1.0 / (T * B), kd, B)


def _taps(W):
    """(H_in, H_out, 3) conv weight -> (3*H_in, H_out), tap-major."""
    return np.ascontiguousarray(W.transpose(2, 0, 1).reshape(-1, W.shape[1]))


def _forward(p, batch: Batch):
    E = p["embed"][batch.tokens]
    Epad = np.vstack([E, np.zeros((1, E.shape[1]))])
    # taps (left, centre, right) stacked so the convolution is one matmul
    X = np.hstack([Epad[batch.left], E, Epad[batch.right]])
    h0 = np.tanh(X @ _taps(p["mix.weight"]) + p["mix.bias"])
    h1 = np.tanh(h0 @ p["hidden1.weight"] + p["hidden1.bias"])
    h2 = np.tanh(h1 @ p["hidden2.weight"] + p["hidden2.bias"])
    out = h2 @ p["head.weight"] + p["head.bias"]
    return out, (X, h0, h1, h2)


def _split(out, r, D):
    return out[:, : r * D], out[:, r * D :]


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_and_grad(params, batch: Batch, r, D, kd_weight=0.0, need_grad=True):
    """Mean-over-sequences loss of a packed batch and its gradient w.r.t. every parameter.

    ``params`` is any mapping of name -> array; computation happens in float64.
    """
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    out, (X, h0, h1, h2) = _forward(p, batch)
    frames, stops = _split(out, r, D)

    diff = frames - batch.frame_t
    loss = float((batch.w_frame * diff**2).sum())
    loss += float((batch.w_stop * (_softplus(stops) - batch.stop_t * stops)).sum())
    d_frames = 2.0 * batch.w_frame * diff
    if kd_weight:
        kdiff = frames - batch.kd_frames
        loss += kd_weight * float((batch.w_frame * kdiff**2).sum())
        d_frames = d_frames + 2.0 * kd_weight * batch.w_frame * kdiff
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    if not need_grad:
        return loss, None

    d_out = np.concatenate([d_frames, batch.w_stop * (_sigmoid(stops) - batch.stop_t)], axis=1)
    g = {}
    g["head.weight"] = h2.T @ d_out
    g["head.bias"] = d_out.sum(0)
    da2 = (d_out @ p["head.weight"].T) * (1.0 - h2**2)
    g["hidden2.weight"] = h1.T @ da2
    g["hidden2.bias"] = da2.sum(0)
    da1 = (da2 @ p["hidden2.weight"].T) * (1.0 - h1**2)
    g["hidden1.weight"] = h0.T @ da1
    g["hidden1.bias"] = da1.sum(0)
    da0 = (da1 @ p["hidden1.weight"].T) * (1.0 - h0**2)
    H = p["mix.weight"].shape[0]
    g["mix.weight"] = (X.T @ da0).reshape(3, H, -1).transpose(1, 2, 0)
    g["mix.bias"] = da0.sum(0)

    P = len(batch.tokens)
    dX = da0 @ _taps(p["mix.weight"]).T
    dE = dX[:, H : 2 * H].copy()
    # neighbour taps send gradient back to the position they read from;
    # each position is read at most once as a left and once as a right neighbour
    dpad = np.zeros((P + 1, H))
    dpad[batch.left] += dX[:, :H]
    dpad[batch.right] += dX[:, 2 * H :]
    dE += dpad[:P]
    g["embed"] = np.zeros_like(p["embed"])
    np.add.at(g["embed"], batch.tokens, dE)

    for k, v in g.items():
        if not np.isfinite(v).all():
            raise TrainingDiverged(f"non-finite gradient in {k}")
    return loss, g


def _check_tokens(model: ToyModel, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) < 1:
        raise ValueError("token sequence must be 1-D and non-empty")
    if tokens.min() < 0 or tokens.max() >= model.K:
        raise ValueError(f"token out of range [0, {model.K})")
    return tokens


def forward(model: ToyModel, x) -> FrameSeq:
    x = _check_tokens(model, x)
    out, _ = _forward(model.params.to_dict(np.float64), make_batch([x]))
    frames, stops = _split(out, model.r, model.D)
    return FrameSeq(frames.reshape(-1, model.D), stops.reshape(-1))


def forward_many(model: ToyModel, xs) -> List[FrameSeq]:
    """``forward`` over many sequences in a single packed pass."""
    if len(xs) == 0:
        return []
    xs = [_check_tokens(model, x) for x in xs]
    out, _ = _forward(model.params.to_dict(np.float64), make_batch(xs))
    frames, stops = _split(out, model.r, model.D)
    res, pos = [], 0
    for x in xs:
        L = len(x)
        res.append(FrameSeq(frames[pos : pos + L].reshape(-1, model.D), stops[pos : pos + L].reshape(-1)))
        pos += L
    return res


def loss(pred: FrameSeq, target: FrameSeq) -> float:
    """Frame MSE plus mean stop-token BCE (stop logits through a sigmoid)."""
    if pred.frames.shape != target.frames.shape or pred.stop.shape != target.stop.shape:
        raise ValueError(f"shape mismatch {pred.frames.shape} vs {target.frames.shape}")
    mse = float(np.mean((pred.frames - target.frames) ** 2))
    bce = float(np.mean(_softplus(pred.stop) - target.stop * pred.stop))
    return mse + bce


def _dataset_batch(model, dataset, idx, kd_frames=None):
    kd = [kd_frames[i] for i in idx] if kd_frames is not None else None
    return make_batch(
        [dataset.inputs[i] for i in idx], [dataset.targets[i] for i in idx], model.r, model.D, kd
    )


def gradients(model: ToyModel, batch) -> dict:
    """Exact gradients of the mean batch loss; ``batch`` is a SynthDataset or a packed Batch."""
    if isinstance(batch, SynthDataset):
        if len(batch) == 0:
            raise ValueError("empty batch")
        batch = _dataset_batch(model, batch, range(len(batch)))
    _, g = loss_and_grad(model.params.entries, batch, model.r, model.D)
    return g


def dataset_loss(model: ToyModel, dataset: SynthDataset) -> float:
    batch = _dataset_batch(model, dataset, range(len(dataset)))
    return loss_and_grad(model.params.entries, batch, model.r, model.D, need_grad=False)[0]


def batch_order(n, batch_size, seed):
    """Endless deterministic stream of index batches, reshuffled every epoch."""
    rng = np.random.default_rng([seed, 0x5EED])
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i : i + batch_size]


def steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)


def train(
    model: ToyModel,
    dataset: SynthDataset,
    opt: TrainOptions,
    grad_mask: Optional[PruneMask] = None,
    *,
    kd_frames: Optional[Sequence[np.ndarray]] = None,
    kd_weight: float = 0.0,
    on_step: Optional[Callable] = None,
):
    """Plain SGD. Returns ``(trained_model, [(step, loss), ...])``.

    ``grad_mask`` zeroes gradients at pruned coordinates before each update.
    ``on_step(step, params)`` runs after every update and may edit the
    float32 ``params`` dict in place (used for re-pruning).
    """
    if opt.steps < 1:
        raise ValueError("steps must be >= 1")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = model.params.to_dict(np.float32)
    gm = None
    if grad_mask is not None:
        gm = {n: grad_mask[n] for n in grad_mask.names()}
    curve = []
    batches = batch_order(len(dataset), opt.batch_size, opt.seed)
    for step in range(1, opt.steps + 1):
        batch = _dataset_batch(model, dataset, next(batches), kd_frames)
        # overflow shows up as a non-finite loss or gradient, reported below
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                value, g = loss_and_grad(params, batch, model.r, model.D, kd_weight)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from None
            curve.append((step, value))
            if opt.lr != 0:
                for name, grad in g.items():
                    if gm is not None and name in gm:
                        grad = np.where(gm[name], grad, 0.0)
                    params[name] = (params[name] - opt.lr * grad).astype(np.float32)
        if on_step is not None:
            on_step(step, params)
    if not all(np.isfinite(a).all() for a in params.values()):
        raise TrainingDiverged(f"step {opt.steps}: non-finite weights after the last update")
    return model.with_params(ParamStore(params, model.params.prunable)), curve


def synthesize_labels(teacher: ToyModel, xs, codebook=None) -> SynthDataset:
    """Label token sequences with the teacher's own output (stop targets hardened at 0.5)."""
    xs = [_check_tokens(teacher, x) for x in xs]
    preds = [forward(teacher, x) for x in xs]
    targets = [FrameSeq(p.frames, (_sigmoid(p.stop) > 0.5).astype(np.float64)) for p in preds]
    if codebook is None:
        codebook = np.zeros((teacher.K, teacher.D))
    return SynthDataset(list(xs), targets, codebook, teacher.K, teacher.D, teacher.r)


def transcribe(frames: FrameSeq, codebook: np.ndarray, r: int) -> np.ndarray:
    """Nearest-codebook decoding of each ``r``-frame block, cut after the first stop block."""
    T = frames.frames.shape[0]
    if T % r:
        raise ValueError(f"T={T} not divisible by r={r}")
    blocks = frames.frames.reshape(T // r, r, -1)
    dist = np.sqrt(((blocks[:, :, None, :] - codebook[None, None, :, :]) ** 2).sum(-1)).mean(1)
    tokens = dist.argmin(1)
    stop_prob = _sigmoid(frames.stop.reshape(T // r, r)).mean(1)
    fired = np.flatnonzero(stop_prob > 0.5)
    if fired.size:
        tokens = tokens[: fired[0] + 1]
    return tokens


def toy_wer(model: ToyModel, dataset: SynthDataset) -> float:
    """Corpus WER of transcribe(forward(x)) against x."""
    preds = forward_many(model, dataset.inputs)
    hyps = [transcribe(p, dataset.codebook, model.r) for p in preds]
    return corpus_wer(dataset.inputs, hyps)

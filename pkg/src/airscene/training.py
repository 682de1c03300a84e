"""Training loop, evaluation metrics, and the constant-velocity baseline.

One scene is one tape: losses are averaged over the scenes of a batch by
scaling each scene's loss before backpropagation, so parameters see the
batch-mean gradient without any cross-scene padding.  Everything random
(init, shuffling) derives from the one seed in ``TrainConfig``, which makes
rerunning a config bit-identical on the same machine.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import DatasetStats, SceneWindow, check_scene, denormalize_positions, normalize
from .model import ModelConfig, forward_tape, init_params
from .numerics import Var
from .seeding import derive_seed

LOSS_MODES = ("supervised", "unsupervised")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10          # epochs without improvement before stopping
    clip_norm: float = 1.0
    loss_mode: str = "supervised"
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(
                f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}"
            )
        if self.lr < 0 or self.clip_norm <= 0:
            raise ValueError("lr must be >= 0 and clip_norm > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for one epoch under the configured schedule.

    Cosine anneals from lr to lr/100 across max_epochs; late-phase step
    noise otherwise keeps validation error from settling.
    """
    if cfg.lr_schedule == "constant" or cfg.max_epochs == 1:
        return cfg.lr
    lr_min = 0.01 * cfg.lr
    span = cfg.max_epochs - 1
    return lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + math.cos(math.pi * epoch / span))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_ade: float
    val_fde: float
    val_loss: float     # validation loss in the active mode, normalized units


@dataclass
class TrainResult:
    params: dict[str, Var]
    stats: DatasetStats
    metrics: list[EpochMetrics]
    best_epoch: int


@dataclass
class EvalResult:
    ade: float          # km, mean over valid aircraft of per-aircraft mean error
    fde: float          # km, mean over valid aircraft of final-step error
    n_aircraft: int


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction, applied to the tape's leaf parameters."""

    def __init__(self, params: dict[str, Var], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(params: dict[str, Var], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def _loss_mask(scene: SceneWindow, width: int) -> np.ndarray:
    return np.repeat(scene.valid[:, None], width, axis=1)


def scene_loss(scene: SceneWindow, params: dict[str, Var],
               model_cfg: ModelConfig, loss_mode: str) -> Var:
    """Masked MSE of one normalized scene in the requested mode."""
    pred, recon, _ = forward_tape(scene.past, scene.valid, params, model_cfg)
    if loss_mode == "supervised":
        out = pred
        target = scene.future.reshape(scene.n_slots, -1)
    else:
        out = recon
        target = scene.past.reshape(scene.n_slots, -1)
    return nm.mse(out, nm.const(target), mask=_loss_mask(scene, target.shape[1]))


def ade_fde(pred: np.ndarray, future: np.ndarray, valid: np.ndarray) -> tuple[float, float, int]:
    """Per-aircraft displacement errors of one scene, in input units.

    Returns (sum of per-aircraft mean errors, sum of final-step errors,
    number of valid aircraft) so callers can aggregate across scenes.
    """
    err = np.linalg.norm(pred - future, axis=2)      # (N, H)
    ade_sum = float(err[valid].mean(axis=1).sum())
    fde_sum = float(err[valid][:, -1].sum())
    return ade_sum, fde_sum, int(valid.sum())


def predict_scene(scene: SceneWindow, params: dict[str, Var],
                  model_cfg: ModelConfig, stats: DatasetStats) -> np.ndarray:
    """Raw-km predictions (N, H, 3) for one raw scene."""
    normed = normalize(scene, stats)
    pred, _, _ = forward_tape(normed.past, normed.valid, params, model_cfg)
    out = denormalize_positions(
        np.array(pred.value).reshape(scene.n_slots, model_cfg.H, 3), stats
    )
    out[~scene.valid] = 0.0
    return out


def evaluate(scenes: Sequence[SceneWindow], params: dict[str, Var],
             model_cfg: ModelConfig, stats: DatasetStats) -> EvalResult:
    """Model ADE/FDE in km over every valid aircraft of ``scenes`` (raw)."""
    ade_total = fde_total = 0.0
    count = 0
    for scene in scenes:
        pred = predict_scene(scene, params, model_cfg, stats)
        a, f, n = ade_fde(pred, scene.future, scene.valid)
        ade_total += a
        fde_total += f
        count += n
    if count == 0:
        raise ValueError("evaluate needs at least one valid aircraft")
    return EvalResult(ade_total / count, fde_total / count, count)


def baseline_constant_velocity(scene: SceneWindow, k: int = 3) -> np.ndarray:
    """Extrapolate each aircraft at the mean velocity of its last k steps.

    Uses min(k, T-1) past displacements; operates on raw positions and
    returns (N, H, 3) in the same units.
    """
    if scene.normalized:
        raise ValueError("baseline expects raw (denormalized) scenes")
    k = min(k, scene.T - 1)
    if k < 1:
        raise ValueError("baseline needs at least two past steps")
    diffs = np.diff(scene.past[:, -(k + 1):, :], axis=1)     # (N, k, 3)
    vel = diffs.mean(axis=1)                                 # (N, 3) per-step
    last = scene.past[:, -1, :]
    steps = np.arange(1, scene.H + 1, dtype=np.float64)
    pred = last[:, None, :] + steps[None, :, None] * vel[:, None, :]
    pred[~scene.valid] = 0.0
    return pred


def evaluate_baseline(scenes: Sequence[SceneWindow], k: int = 3) -> EvalResult:
    """Constant-velocity ADE/FDE over the same aggregation as ``evaluate``."""
    ade_total = fde_total = 0.0
    count = 0
    for scene in scenes:
        pred = baseline_constant_velocity(scene, k=k)
        a, f, n = ade_fde(pred, scene.future, scene.valid)
        ade_total += a
        fde_total += f
        count += n
    if count == 0:
        raise ValueError("evaluate_baseline needs at least one valid aircraft")
    return EvalResult(ade_total / count, fde_total / count, count)


def reconstruction_mse(scenes: Sequence[SceneWindow], params: dict[str, Var],
                       model_cfg: ModelConfig, stats: DatasetStats) -> float:
    """Mean masked reconstruction MSE over raw scenes, in normalized units."""
    if not scenes:
        raise ValueError("reconstruction_mse needs at least one scene")
    total = 0.0
    for scene in scenes:
        normed = normalize(scene, stats)
        total += scene_loss(normed, params, model_cfg, "unsupervised").item()
    return total / len(scenes)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _snapshot(params: dict[str, Var]) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in params.items()}


def _restore(params: dict[str, Var], snap: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.value[...] = snap[k]


def train(
    train_scenes: Sequence[SceneWindow],
    val_scenes: Sequence[SceneWindow],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> TrainResult:
    """Fit the model and return the best-validation parameters.

    Scenes come in raw; normalization stats are estimated on the training
    split only.  Early stopping watches validation ADE in supervised mode
    and validation reconstruction loss in unsupervised mode.
    """
    if not train_scenes or not val_scenes:
        raise ValueError("train and validation splits must both be non-empty")
    for scene in list(train_scenes) + list(val_scenes):
        check_scene(scene, T=model_cfg.T, H=model_cfg.H)
        if scene.normalized:
            raise ValueError("train() expects raw scenes and normalizes internally")

    stats = DatasetStats.from_scenes(train_scenes)
    norm_train = [normalize(s, stats) for s in train_scenes]
    norm_val = [normalize(s, stats) for s in val_scenes]

    params = init_params(model_cfg, cfg.seed)
    opt = Adam(params, lr=cfg.lr)
    plist = list(params.values())

    metrics: list[EpochMetrics] = []
    best_monitor = math.inf
    best_snap = _snapshot(params)
    best_epoch = -1
    since_best = 0

    for epoch in range(cfg.max_epochs):
        opt.lr = epoch_lr(cfg, epoch)
        rng = np.random.default_rng(derive_seed(cfg.seed, f"shuffle/epoch{epoch}"))
        order = rng.permutation(len(norm_train))
        loss_total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            nm.zero_grads(plist)
            for idx in batch:
                loss = scene_loss(norm_train[idx], params, model_cfg, cfg.loss_mode)
                (loss * (1.0 / len(batch))).backward()
                loss_total += loss.item()
            clip_gradients(params, cfg.clip_norm)
            opt.step()
        train_loss = loss_total / len(norm_train)

        val_loss = sum(
            scene_loss(s, params, model_cfg, cfg.loss_mode).item() for s in norm_val
        ) / len(norm_val)
        val_eval = evaluate(list(val_scenes), params, model_cfg, stats)
        metrics.append(EpochMetrics(epoch, train_loss, val_eval.ade, val_eval.fde, val_loss))

        monitor = val_eval.ade if cfg.loss_mode == "supervised" else val_loss
        if monitor < best_monitor:
            best_monitor = monitor
            best_snap = _snapshot(params)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    _restore(params, best_snap)
    return TrainResult(params=params, stats=stats, metrics=metrics, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# metrics file
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ("epoch", "train_loss", "val_ade", "val_fde")


def save_metrics_csv(metrics: Sequence[EpochMetrics], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for m in metrics:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.val_ade), repr(m.val_fde)])


def load_metrics_csv(path) -> list[EpochMetrics]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochMetrics(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                val_ade=float(row["val_ade"]),
                val_fde=float(row["val_fde"]),
                val_loss=math.nan,
            ))
    return out

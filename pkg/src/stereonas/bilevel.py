"""Optimizers, learning-rate schedules, and the training loops.

Two loops matter here.  ``train_search`` runs the alternating scheme on
a relaxed search network: a warm-start phase updating only connection
weights w, then an alternating phase where each iteration takes one SGD
step on w using a training batch and one Adam step on the architecture
parameters alpha using a validation batch (first order: the alpha step
treats the current w as a constant).  ``train_derived`` and
``snapshot_restart`` train discrete networks; the latter resumes from a
checkpoint and anneals the learning rate to zero over exactly the given
budget, which makes it the objective handed to the budget-aware
hyperparameter optimizer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .netbuilder import (
    NetStack,
    SearchNet,
    SearchNetConfig,
    build_search_net,
    load_checkpoint,
)
from .ops import epe, multiscale_epe
from .tensor import Tape, Tensor, backward, bilinear_resize, scalar_mul

__all__ = [
    "SgdConfig",
    "AdamConfig",
    "SgdState",
    "AdamState",
    "BilevelState",
    "StereoArrays",
    "TrainValSplit",
    "Batch",
    "cosine_lr",
    "step_lr",
    "sgd_step",
    "adam_step",
    "sample_batch",
    "alternate_step",
    "train_search",
    "train_derived",
    "snapshot_restart",
    "evaluate_epe",
    "write_history",
]


# ---------------------------------------------------------------------------
# Learning-rate schedules


def cosine_lr(t: int, T: int, lr_base: float, lr_min: float) -> float:
    """Half-cosine decay from lr_base at t=0 to lr_min at t=T."""
    if T <= 0:
        raise ConfigError(f"cosine schedule needs T > 0, got {T}")
    if not 0 <= t <= T:
        raise ConfigError(f"schedule step {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * t / T))


def step_lr(t: int, milestones, factor: float, base: float) -> float:
    """Piecewise-constant decay; a milestone applies at its own step (inclusive)."""
    return base * factor ** sum(1 for m in milestones if m <= t)


# ---------------------------------------------------------------------------
# Optimizers


@dataclass(frozen=True)
class SgdConfig:
    lr_base: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4

    def __post_init__(self):
        if not self.lr_base >= self.lr_min > 0:
            raise ConfigError(
                f"need lr_base >= lr_min > 0, got {self.lr_base}, {self.lr_min}"
            )


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


class SgdState:
    def __init__(self, params):
        self.velocity = [np.zeros_like(p.data) for p in params]


class AdamState:
    def __init__(self, params):
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def _l2(g: np.ndarray, p: Tensor, weight_decay: float) -> np.ndarray:
    # plain L2 added to the gradient, not the decoupled form
    if weight_decay:
        return g + weight_decay * p.data
    return g


def sgd_step(params, grads, cfg: SgdConfig, state: SgdState,
             lr: float | None = None) -> None:
    """Momentum SGD over aligned (params, grads); None grads are skipped."""
    if lr is None:
        lr = cfg.lr_base
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        g = _l2(g, p, cfg.weight_decay)
        v *= cfg.momentum
        v += g
        p.data = p.data - lr * v


def adam_step(params, grads, cfg: AdamConfig, state: AdamState,
              lr: float | None = None) -> None:
    """Bias-corrected Adam; shares the step counter across all parameters."""
    if lr is None:
        lr = cfg.lr
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        g = _l2(g, p, cfg.weight_decay)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# Data containers and batch sampling


@dataclass(frozen=True)
class StereoArrays:
    """A split of the dataset as plain arrays, all (N, C, H, W) / (N, 1, H, W)."""

    left: np.ndarray
    right: np.ndarray
    disp: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ShapeError(f"views differ: {self.left.shape} vs {self.right.shape}")
        n, _, h, w = self.left.shape
        if self.disp.shape != (n, 1, h, w):
            raise ShapeError(f"disparity shape {self.disp.shape} for views {self.left.shape}")
        if self.valid is not None and self.valid.shape != self.disp.shape:
            raise ShapeError(f"valid-mask shape {self.valid.shape}")

    def __len__(self) -> int:
        return self.left.shape[0]


@dataclass(frozen=True)
class TrainValSplit:
    train: StereoArrays
    val: StereoArrays


@dataclass(frozen=True)
class Batch:
    left: np.ndarray
    right: np.ndarray
    disp: np.ndarray
    valid: np.ndarray | None = None
    tag: str | None = None  # "train" / "val"; checked by alternate_step


def sample_batch(arrays: StereoArrays, rng, batch_size: int,
                 crop: tuple[int, int] | None = None, align: int = 1,
                 tag: str | None = None) -> Batch:
    """Draw samples with replacement; optional aligned random crop."""
    idx = rng.integers(0, len(arrays), size=batch_size)
    left, right, disp = arrays.left[idx], arrays.right[idx], arrays.disp[idx]
    valid = arrays.valid[idx] if arrays.valid is not None else None
    if crop is not None:
        h, w = left.shape[2:]
        ch, cw = crop
        if ch % align or cw % align:
            raise ConfigError(f"crop {crop} not aligned to factor {align}")
        if ch > h or cw > w:
            raise ConfigError(f"crop {crop} larger than image {h}x{w}")
        y0 = int(rng.integers(0, (h - ch) // align + 1)) * align
        x0 = int(rng.integers(0, (w - cw) // align + 1)) * align
        sl = np.s_[:, :, y0:y0 + ch, x0:x0 + cw]
        left, right, disp = left[sl], right[sl], disp[sl]
        if valid is not None:
            valid = valid[sl]
    return Batch(left, right, disp, valid, tag)


# ---------------------------------------------------------------------------
# Forward helpers shared by the loops


def _scalar(t: Tensor) -> float:
    return float(t.data.reshape(-1)[0])


def _predictions(net, batch: Batch):
    left, right = Tensor(batch.left), Tensor(batch.right)
    if isinstance(net, NetStack):
        return [net.forward(left, right)[-1]]
    return net.forward(left, right)


def _batch_loss(net, batch: Batch, loss_weights=None) -> Tensor:
    preds = _predictions(net, batch)
    weights = loss_weights if loss_weights is not None else [1.0] * len(preds)
    return multiscale_epe(preds, Tensor(batch.disp), weights)


def evaluate_epe(net, arrays: StereoArrays, batch_size: int = 8) -> float:
    """Full-resolution validation EPE: upsample the final prediction by its
    scale, multiply disparities accordingly, average |error| over valid pixels."""
    total, count = 0.0, 0
    for start in range(0, len(arrays), batch_size):
        sl = slice(start, min(start + batch_size, len(arrays)))
        left, right = Tensor(arrays.left[sl]), Tensor(arrays.right[sl])
        preds = net.forward(left, right)
        out, scale = preds[-1]
        if scale > 1:
            out = scalar_mul(bilinear_resize(out, scale), float(scale))
        valid = Tensor(arrays.valid[sl]) if arrays.valid is not None else None
        err = epe(out, Tensor(arrays.disp[sl]), valid_mask=valid)
        n_px = (int(arrays.valid[sl].sum()) if arrays.valid is not None
                else out.data.size)
        total += _scalar(err) * n_px
        count += n_px
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# Alternating bilevel step


@dataclass
class BilevelState:
    warm_start_iters: int = 200
    alternating_iters: int = 1000
    tau_start: float = 1.0
    tau_end: float = 0.2
    iteration: int = 0
    phase: str = "warm"
    _transitions: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.warm_start_iters < 0 or self.alternating_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.warm_start_iters == 0:
            self.phase = "alternating"
            self._transitions = 1

    @property
    def total_iters(self) -> int:
        return self.warm_start_iters + self.alternating_iters

    def advance(self) -> None:
        self.iteration += 1
        if self.phase == "warm" and self.iteration >= self.warm_start_iters:
            self.phase = "alternating"
            self._transitions += 1
            if self._transitions != 1:
                raise ConfigError("phase must transition exactly once")

    def tau(self) -> float:
        """Linear anneal across the alternating phase; constant during warm start."""
        if self.phase == "warm":
            return self.tau_start
        steps = self.alternating_iters - 1
        if steps <= 0:
            return self.tau_end
        j = min(self.iteration - self.warm_start_iters, steps)
        return self.tau_start + (self.tau_end - self.tau_start) * j / steps


def alternate_step(net: SearchNet, alphas, batch_train: Batch, batch_val: Batch,
                   w_cfg: SgdConfig, w_state: SgdState,
                   a_cfg: AdamConfig, a_state: AdamState,
                   lr_w: float, loss_weights=None) -> tuple[float, float]:
    """One alternating iteration: w on the training batch, alpha on validation.

    First order only: the alpha update differentiates the validation loss
    at the current w and ignores dw/dalpha.  Returns (train, val) losses.
    """
    if batch_train.tag not in (None, "train"):
        raise ConfigError(f"weight update fed a batch tagged {batch_train.tag!r}")
    if batch_val.tag not in (None, "val"):
        raise ConfigError(f"alpha update fed a batch tagged {batch_val.tag!r}")
    w_params = net.params()
    a_params = alphas.params()

    with Tape() as tape:
        loss_t = _batch_loss(net, batch_train, loss_weights)
        grads = backward(tape, loss_t)
    sgd_step(w_params, [grads.get(p) for p in w_params], w_cfg, w_state, lr=lr_w)

    with Tape() as tape:
        loss_v = _batch_loss(net, batch_val, loss_weights)
        grads = backward(tape, loss_v)
    adam_step(a_params, [grads.get(a) for a in a_params], a_cfg, a_state)
    return _scalar(loss_t), _scalar(loss_v)


# ---------------------------------------------------------------------------
# Search training


@dataclass(frozen=True)
class SearchTrainConfig:
    net: SearchNetConfig = SearchNetConfig()
    warm_start_iters: int = 200
    alternating_iters: int = 1000
    batch_size: int = 4
    sgd: SgdConfig = SgdConfig()
    adam: AdamConfig = AdamConfig()
    tau_start: float = 1.0
    tau_end: float = 0.2
    crop: tuple | None = None
    loss_weights: tuple | None = None


@dataclass
class SearchResult:
    net: SearchNet
    alphas: object
    history: list
    val_epe_start: float
    val_epe_end: float


def train_search(cfg: SearchTrainConfig, data: TrainValSplit, seed: int = 0) -> SearchResult:
    """Warm start on w, then alternate w/alpha; deterministic per seed.

    History rows are (iter, phase, train_epe, val_epe, lr, tau); val_epe is
    empty during warm start, where no validation batch is consumed.
    """
    rng = np.random.default_rng([seed, 0xB11E])
    net = build_search_net(cfg.net, seed=seed)
    alphas = net.alphas
    alphas.temperature = cfg.tau_start
    w_params = net.params()
    w_state = SgdState(w_params)
    a_state = AdamState(alphas.params())
    state = BilevelState(cfg.warm_start_iters, cfg.alternating_iters,
                         cfg.tau_start, cfg.tau_end)
    align = cfg.net.encoder_factor

    probe = min(len(data.val), 4 * cfg.batch_size)
    probe_arrays = StereoArrays(
        data.val.left[:probe], data.val.right[:probe], data.val.disp[:probe],
        data.val.valid[:probe] if data.val.valid is not None else None)
    val_epe_start = evaluate_epe(net, probe_arrays)

    history = []
    T = state.total_iters
    while state.iteration < T:
        it = state.iteration
        lr = cosine_lr(it, T, cfg.sgd.lr_base, cfg.sgd.lr_min)
        if state.phase == "warm":
            batch = sample_batch(data.train, rng, cfg.batch_size, cfg.crop,
                                 align, tag="train")
            with Tape() as tape:
                loss = _batch_loss(net, batch, cfg.loss_weights)
                grads = backward(tape, loss)
            sgd_step(w_params, [grads.get(p) for p in w_params], cfg.sgd,
                     w_state, lr=lr)
            history.append((it, "warm", _scalar(loss), "", lr, state.tau()))
        else:
            alphas.temperature = state.tau()
            bt = sample_batch(data.train, rng, cfg.batch_size, cfg.crop,
                              align, tag="train")
            bv = sample_batch(data.val, rng, cfg.batch_size, cfg.crop,
                              align, tag="val")
            lt, lv = alternate_step(net, alphas, bt, bv, cfg.sgd, w_state,
                                    cfg.adam, a_state, lr, cfg.loss_weights)
            history.append((it, "alternating", lt, lv, lr, alphas.temperature))
        state.advance()

    val_epe_end = evaluate_epe(net, probe_arrays)
    return SearchResult(net, alphas, history, val_epe_start, val_epe_end)


def write_history(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "phase", "train_epe", "val_epe", "lr", "tau"])
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Derived-network training


@dataclass(frozen=True)
class TrainSchedule:
    adam: AdamConfig = AdamConfig()
    milestones: tuple = ()
    drop_factor: float = 0.5
    batch_size: int = 4
    crop: tuple | None = None
    loss_weights: tuple | None = None


@dataclass
class TrainResult:
    weights: list
    final_epe: float
    history: list


def train_derived(net, data: TrainValSplit, schedule: TrainSchedule,
                  budget_iters: int, seed: int = 0) -> TrainResult:
    """Adam + step schedule on a derived net or stack; returns held-out EPE.

    For a stack with freeze_previous set, only the last net's parameters
    are updated (earlier nets are marked as constants for the tape).
    """
    rng = np.random.default_rng([seed, 0xD321])
    if isinstance(net, NetStack):
        net.set_freeze_flags()
        align = net.nets[0].cfg.encoder_factor
    else:
        align = net.cfg.encoder_factor
    params = net.params()
    a_state = AdamState(params)
    history = []
    for it in range(budget_iters):
        lr = step_lr(it, schedule.milestones, schedule.drop_factor, schedule.adam.lr)
        batch = sample_batch(data.train, rng, schedule.batch_size, schedule.crop,
                             align, tag="train")
        with Tape() as tape:
            loss = _batch_loss(net, batch, schedule.loss_weights)
            grads = backward(tape, loss)
        adam_step(params, [grads.get(p) for p in params], schedule.adam,
                  a_state, lr=lr)
        history.append(_scalar(loss))
    return TrainResult(params, evaluate_epe(net, data.val), history)


def snapshot_restart(checkpoint_dir: str, lr: float, weight_decay: float,
                     budget_iters: int, data: TrainValSplit,
                     schedule: TrainSchedule | None = None, seed: int = 0) -> float:
    """Resume a snapshot and train for exactly budget_iters with the learning
    rate cosine-annealed from `lr` to zero; returns the validation EPE.

    This is the objective evaluated by the budget-aware optimizer: the
    sampled (lr, weight_decay) pair is scored at fidelity budget_iters.
    """
    base = schedule or TrainSchedule()
    net = load_checkpoint(checkpoint_dir, seed=seed)
    if isinstance(net, SearchNet):
        raise ConfigError("snapshot restart expects a derived-network checkpoint")
    adam = AdamConfig(lr=lr, betas=base.adam.betas, eps=base.adam.eps,
                      weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 0x5A97])
    params = net.params()
    a_state = AdamState(params)
    align = net.cfg.encoder_factor
    for it in range(budget_iters):
        lr_t = cosine_lr(it, budget_iters, lr, 0.0)
        batch = sample_batch(data.train, rng, base.batch_size, base.crop,
                             align, tag="train")
        with Tape() as tape:
            loss = _batch_loss(net, batch, base.loss_weights)
            grads = backward(tape, loss)
        adam_step(params, [grads.get(p) for p in params], adam, a_state, lr=lr_t)
    return evaluate_epe(net, data.val)

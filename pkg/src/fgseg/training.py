"""Scene-specific training: frame selection, class-weighted cross entropy,
RMSProp with a reduce-on-plateau schedule, and best-checkpoint selection.

Losses ignore void pixels entirely; per-frame class weights rebalance the
foreground/background imbalance of each training frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabelMask, pad_labels, pad_to_multiple
from .kernels import NonFiniteError, ShapeError
from .model import ModelParams, backward, forward, get_state, set_state
from .pyramid import build_pyramid

PROB_CLIP = 1e-7


@dataclass
class TrainingExample:
    frame: np.ndarray      # (3, H, W) raw RGB values
    labels: LabelMask
    frame_index: int

    def __post_init__(self):
        if self.frame.shape[-2:] != self.labels.shape:
            raise ShapeError(f"example {self.frame_index}: frame "
                             f"{self.frame.shape[-2:]} vs labels {self.labels.shape}")


@dataclass
class TrainConfig:
    n_frames: int = 50
    epochs: int | None = None   # 60 up to 50 frames, 50 beyond
    lr: float = 1e-4
    rho: float = 0.9
    epsilon: float = 1e-8
    batch: int = 1
    val_split: float = 0.20
    plateau_patience: int = 6
    plateau_factor: float = 0.1
    min_delta: float = 1e-4
    l2: float = 5e-4
    threshold: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.epochs is None:
            self.epochs = 60 if self.n_frames <= 50 else 50
        if not 0.0 < self.val_split < 1.0:
            raise ValueError(f"val_split must be in (0, 1), got {self.val_split}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.plateau_patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.plateau_patience}")
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")


@dataclass
class OptimizerState:
    acc: dict            # layer name -> [acc_weights, acc_bias]
    lr: float
    wait: int = 0        # epochs since the last plateau-relevant improvement
    best_val: float = math.inf


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    checkpoint_epoch: int = -1


# ------------------------------------------------------------ frame selection

def select_frames(total, n, seed, focus_list=None):
    """Pick n of total frame indices: explicit list verbatim, else seeded
    uniform sampling without replacement."""
    if focus_list is not None:
        indices = [int(i) for i in focus_list]
        if len(set(indices)) != len(indices):
            raise ValueError("focus list contains duplicate frame indices")
        bad = [i for i in indices if not 0 <= i < total]
        if bad:
            raise ValueError(f"focus list indices out of range [0, {total}): {bad}")
        return indices
    if n > total:
        raise ValueError(f"cannot select {n} frames from {total}")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(total, size=n, replace=False)]


def read_manifest(path):
    """Manual-selection manifest: one frame index per line, # comments allowed."""
    indices = []
    for line in open(path):
        line = line.split("#", 1)[0].strip()
        if line:
            indices.append(int(line))
    if not indices:
        raise ValueError(f"{path}: manifest selects no frames")
    return indices


# -------------------------------------------------------------------- loss

def class_weights(labels: LabelMask):
    """Balanced per-frame weights n/(2*n_fg), n/(2*n_bg) over valid pixels."""
    n_fg, n_bg = labels.counts()
    if n_fg == 0 or n_bg == 0:
        return 1.0, 1.0
    n = n_fg + n_bg
    return n / (2.0 * n_fg), n / (2.0 * n_bg)


def weighted_bce(probs, labels: LabelMask, w_fg, w_bg):
    """Class-weighted binary cross entropy over valid pixels.

    Returns (loss, grad) where grad is dLoss/dprobs, zero at void pixels and
    zero where the clip to [1e-7, 1-1e-7] is active.
    """
    probs = np.asarray(probs)
    p2 = probs[0] if probs.ndim == 3 else probs
    if p2.shape != labels.shape:
        raise ShapeError(f"weighted_bce: probs {p2.shape} vs labels {labels.shape}")
    valid = labels.valid
    m = int(valid.sum())
    if m == 0:
        raise ValueError("weighted_bce: no supervised pixels (all void)")
    y = labels.foreground
    inside = (p2 >= PROB_CLIP) & (p2 <= 1.0 - PROB_CLIP)
    p = np.clip(p2, PROB_CLIP, 1.0 - PROB_CLIP)
    w = np.where(y, w_fg, w_bg)
    terms = np.where(y, np.log(p), np.log1p(-p))
    loss = -float(np.sum(w[valid] * terms[valid])) / m
    grad2 = np.where(y, -w / p, w / (1.0 - p)) / m
    grad2 = np.where(valid & inside, grad2, 0.0).astype(probs.dtype)
    grad = grad2[None] if probs.ndim == 3 else grad2
    return loss, grad


# --------------------------------------------------------------- optimizer

def init_optimizer(model: ModelParams, lr) -> OptimizerState:
    acc = {p.name: [np.zeros_like(p.weights), np.zeros_like(p.bias)]
           for p in model.trainable_layers()}
    return OptimizerState(acc=acc, lr=lr)


def rmsprop_step(model: ModelParams, grads, state: OptimizerState,
                 rho=0.9, epsilon=1e-8):
    """In-place update: a <- rho*a + (1-rho)*g^2; w <- w - lr*g/(sqrt(a)+eps).

    L2 layers add l2*w to the weight gradient first; biases carry no penalty.
    Frozen layers are untouched (they never appear in grads).
    """
    for name, (gw, gb) in grads.items():
        p = model[name]
        if not p.trainable:
            raise ValueError(f"gradient supplied for frozen layer {name}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NonFiniteError(f"rmsprop_step: non-finite gradient for {name}")
        if p.l2 > 0.0:
            gw = gw + p.l2 * p.weights
        acc_w, acc_b = state.acc[name]
        acc_w *= rho
        acc_w += (1.0 - rho) * gw * gw
        acc_b *= rho
        acc_b += (1.0 - rho) * gb * gb
        p.weights -= state.lr * gw / (np.sqrt(acc_w) + epsilon)
        p.bias -= state.lr * gb / (np.sqrt(acc_b) + epsilon)


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau: cut lr by `factor` after `patience` epochs without
    a val-loss improvement of at least `min_delta`."""

    patience: int = 6
    factor: float = 0.1
    min_delta: float = 1e-4

    def observe(self, state: OptimizerState, val_loss):
        """Call once per epoch; returns True when the lr was reduced."""
        if val_loss < state.best_val - self.min_delta:
            state.best_val = val_loss
            state.wait = 0
            return False
        state.wait += 1
        if state.wait >= self.patience:
            state.lr *= self.factor
            state.wait = 0
            return True
        return False


# ------------------------------------------------------------ training loop

def _prepare(example: TrainingExample):
    frame, _ = pad_to_multiple(example.frame, 4)
    labels, _ = pad_labels(example.labels, 4)
    pyr = build_pyramid(frame)
    w_fg, w_bg = class_weights(labels)
    return pyr, labels, w_fg, w_bg


def _epoch_val_loss(model, prepared, val_ids):
    total = 0.0
    for i in val_ids:
        pyr, labels, w_fg, w_bg = prepared[i]
        probs = forward(model, pyr)
        loss, _ = weighted_bce(probs, labels, w_fg, w_bg)
        total += loss
    return total / len(val_ids)


def train(config: TrainConfig, examples, model: ModelParams, progress=None):
    """Shuffle/split once, then per epoch: reshuffle, step per frame, validate,
    checkpoint on improvement, reduce lr on plateau.

    progress, when given, is called as progress(epoch, train_loss, val_loss, lr)
    after each epoch.  Returns (model restored to the best checkpoint,
    TrainHistory).
    """
    if len(examples) < 5:
        raise ValueError(f"need at least 5 examples for a "
                         f"{config.val_split:.0%} validation split, "
                         f"got {len(examples)}")
    rng = np.random.default_rng(config.seed)

    # phase 1 shuffle: who lands in the validation split
    order = rng.permutation(len(examples))
    n_val = max(1, int(len(examples) * config.val_split))
    val_ids = [int(i) for i in order[:n_val]]
    train_ids = [int(i) for i in order[n_val:]]

    prepared = [_prepare(ex) for ex in examples]
    state = init_optimizer(model, config.lr)
    schedule = PlateauSchedule(config.plateau_patience, config.plateau_factor,
                               config.min_delta)
    for p in model.trainable_layers():
        if p.l2 > 0.0:
            p.l2 = config.l2

    history = TrainHistory()
    best_val = math.inf
    best_state = None
    for epoch in range(config.epochs):
        # phase 2 shuffle: visit order within the epoch
        epoch_order = rng.permutation(len(train_ids))
        epoch_loss = 0.0
        for step, k in enumerate(epoch_order):
            pyr, labels, w_fg, w_bg = prepared[train_ids[int(k)]]
            tape = []
            probs = forward(model, pyr, training=True, rng=rng, tape=tape)
            try:
                loss, grad = weighted_bce(probs, labels, w_fg, w_bg)
            except ValueError as e:
                raise ValueError(f"epoch {epoch} step {step}: {e}") from e
            if not math.isfinite(loss):
                raise NonFiniteError(f"epoch {epoch} step {step}: loss is {loss}")
            grads = backward(model, tape, grad)
            rmsprop_step(model, grads, state, config.rho, config.epsilon)
            epoch_loss += loss
        train_loss = epoch_loss / max(1, len(train_ids))
        val_loss = _epoch_val_loss(model, prepared, val_ids)

        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.lr.append(state.lr)

        # checkpoint on any strict improvement so the saved epoch is the
        # argmin; the plateau counter uses min_delta separately
        if val_loss < best_val:
            best_val = val_loss
            best_state = get_state(model)
            history.checkpoint_epoch = epoch
        schedule.observe(state, val_loss)
        if progress is not None:
            progress(epoch, train_loss, val_loss, history.lr[-1])

    if best_state is not None:
        set_state(model, best_state)
    return model, history


def examples_from_pairs(pairs, indices=None):
    """Wrap (frame, LabelMask) pairs; indices selects a subset."""
    if indices is None:
        indices = range(len(pairs))
    return [TrainingExample(pairs[i][0], pairs[i][1], i) for i in indices]

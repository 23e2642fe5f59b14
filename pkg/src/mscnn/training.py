"""Training: the regularized reconstruction loss, the mini-batch SGD loop
with grouped learning rates, and the one-shot stability-triggered rate
drop.

The loss is the per-pixel mean squared reconstruction error (squared error
sum over a patch divided by its pixel count, averaged over the batch) plus
lambda1 times the sum over intermediate current-branch layers of the
feature mean square. Weight decay enters the update as +2*decay*param via
the SGD rule. Layer 10 of both branches and the fusion parameters use the
reduced "last layer" learning rate.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import network, ops
from .checkpoint import write_checkpoint

QP_SET = (22, 27, 32, 37)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1e-4

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be >= 0, got {self.lambda1}")


@dataclass
class LossBreakdown:
    data_term: float
    reg_term: float

    @property
    def total(self):
        return self.data_term + self.reg_term


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    last_layer_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    iterations_per_epoch: int = 0  # 0: one pass, dataset size // batch size
    lr_drop_factor: float = 100.0
    stability_window: int = 3
    stability_threshold: float = 0.01
    qp: int = 37
    seed: int = 0

    def __post_init__(self):
        # rate 0 freezes a group (the SGD op itself requires lr > 0)
        if self.base_lr < 0 or self.last_layer_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.iterations_per_epoch < 0:
            raise ValueError("epochs / iterations_per_epoch must be >= 0")
        if self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be > 1")
        if self.stability_window < 1 or self.stability_threshold <= 0:
            raise ValueError("bad stability settings")
        if self.qp not in QP_SET:
            raise ValueError(f"qp must be one of {QP_SET}, got {self.qp}")


def total_loss(reconstruction, ground_truth, intermediate_features, cfg):
    """Returns (scalar total, LossBreakdown)."""
    if reconstruction.shape != ground_truth.shape:
        raise ValueError(f"reconstruction {reconstruction.shape} vs "
                         f"ground truth {ground_truth.shape}")
    n = reconstruction.shape[0]
    pix = reconstruction.shape[2] * reconstruction.shape[3]
    diff = reconstruction.astype(np.float64) - ground_truth.astype(np.float64)
    data_term = float((diff * diff).sum() / pix / n)
    reg = 0.0
    if cfg.lambda1 > 0:
        for f in intermediate_features:
            f64 = f.astype(np.float64)
            reg += float((f64 * f64).sum() / f64.size)
        reg *= cfg.lambda1
    breakdown = LossBreakdown(data_term, reg)
    return breakdown.total, breakdown


@dataclass
class TrainState:
    model: model_mod.ModelParameters
    velocity: model_mod.ModelParameters
    epoch: int = 0
    iteration: int = 0
    epoch_losses: list = field(default_factory=list)  # append-only epoch means
    lr_scale: float = 1.0
    lr_dropped: bool = False
    epoch_accum: list = field(default_factory=list)


def model_loss_and_grads(params, config, loss_cfg, cur, ref, gt):
    """Forward both branches + fusion, evaluate the loss, and return exact
    gradients for every parameter group: (breakdown, ModelParameters grads)."""
    macts = model_mod.model_forward(params, config, cur, ref)
    feats = [macts.acts_cur.features[i] for i in network.intermediate_slots(config)
             if i < len(macts.acts_cur.features)]
    total, breakdown = total_loss(macts.reconstruction, gt, feats, loss_cfg)
    if not np.isfinite(total):
        raise RuntimeError(f"training diverged: loss became {total}")
    dt = macts.reconstruction.dtype.type
    n = cur.shape[0]
    pix = cur.shape[2] * cur.shape[3]
    grad_recon = (macts.reconstruction - gt) * dt(2.0 / (pix * n))
    feature_grads = None
    if loss_cfg.lambda1 > 0:
        feature_grads = {
            i: macts.acts_cur.features[i] * dt(2.0 * loss_cfg.lambda1
                                               / macts.acts_cur.features[i].size)
            for i in network.intermediate_slots(config)
            if i < len(macts.acts_cur.features)}
    grads = model_mod.model_backward(params, config, macts, grad_recon, feature_grads)
    return breakdown, grads


def _step_group(param, grad, vel, lr, cfg):
    if lr == 0:
        return param, vel
    return ops.sgd_momentum_step(param, grad, vel, lr, cfg.momentum, cfg.weight_decay)


def apply_updates(state, grads, cfg):
    last = len(state.model.cur.weights) - 1
    for branch, gb, vb in ((state.model.cur, grads.cur, state.velocity.cur),
                           (state.model.ref, grads.ref, state.velocity.ref)):
        for i in range(len(branch.weights)):
            lr = (cfg.last_layer_lr if i == last else cfg.base_lr) * state.lr_scale
            branch.weights[i], vb.weights[i] = _step_group(
                branch.weights[i], gb.weights[i], vb.weights[i], lr, cfg)
            branch.biases[i], vb.biases[i] = _step_group(
                branch.biases[i], gb.biases[i], vb.biases[i], lr, cfg)
    fus, gf, vf = state.model.fusion, grads.fusion, state.velocity.fusion
    lr = cfg.last_layer_lr * state.lr_scale
    fus.gate_weights, vf.gate_weights = _step_group(
        fus.gate_weights, gf.gate_weights, vf.gate_weights, lr, cfg)
    fus.gate_bias, vf.gate_bias = _step_group(
        fus.gate_bias, gf.gate_bias, vf.gate_bias, lr, cfg)


def train_step(state, batch, config, train_cfg, loss_cfg):
    """One forward/backward/update pass on (current, reference, truth)."""
    cur, ref, gt = batch
    if cur.shape[0] == 0:
        raise ValueError("empty batch")
    breakdown, grads = model_loss_and_grads(state.model, config, loss_cfg,
                                            cur, ref, gt)
    apply_updates(state, grads, train_cfg)
    state.iteration += 1
    state.epoch_accum.append(breakdown.total)
    return breakdown


def maybe_drop_lr(state, cfg):
    """Divide the learning rates by the drop factor once the epoch-mean
    loss has changed by less than the threshold for `stability_window`
    consecutive epoch transitions; applies at most once."""
    if state.lr_dropped:
        return state
    h = state.epoch_losses
    if len(h) < cfg.stability_window + 1:
        return state
    for k in range(len(h) - cfg.stability_window, len(h)):
        prev = h[k - 1]
        if abs(h[k] - prev) >= cfg.stability_threshold * max(abs(prev), 1e-12):
            return state
    state.lr_scale /= cfg.lr_drop_factor
    state.lr_dropped = True
    return state


@dataclass
class TrainResult:
    checkpoint_path: str
    loss_curve_path: str
    state: TrainState
    seconds: float


def train(config, train_cfg, loss_cfg, dataset, out_dir,
          pool_window=3, fusion_mode="additive", progress=None):
    """Full training run; writes checkpoint.mscn and loss_curve.csv.

    Deterministic given (seed, config, data): batch sampling, parameter
    initialization and all arithmetic are reproducible, so two identical
    runs write identical bytes. On divergence the previous epoch's
    checkpoint stays on disk and the error propagates.
    """
    if dataset.count == 0:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    m = model_mod.init_model(config, train_cfg.seed, pool_window, fusion_mode)
    state = TrainState(m, m.zeros_like())
    ckpt_path = os.path.join(out_dir, "checkpoint.mscn")
    csv_path = os.path.join(out_dir, "loss_curve.csv")
    write_checkpoint(ckpt_path, config, state.model)
    rng = np.random.default_rng(train_cfg.seed)
    ipe = train_cfg.iterations_per_epoch or max(1, dataset.count // train_cfg.batch_size)
    with open(csv_path, "w", newline="\n") as csv:
        csv.write("epoch,iter,data_term,reg_term,total\n")
        for epoch in range(train_cfg.epochs):
            state.epoch = epoch
            state.epoch_accum = []
            for _ in range(ipe):
                idx = rng.integers(0, dataset.count, train_cfg.batch_size)
                batch = dataset.load_batch(idx)
                bd = train_step(state, batch, config, train_cfg, loss_cfg)
                csv.write(f"{epoch},{state.iteration},{bd.data_term!r},"
                          f"{bd.reg_term!r},{bd.total!r}\n")
            mean_loss = float(np.mean(state.epoch_accum))
            state.epoch_losses.append(mean_loss)
            maybe_drop_lr(state, train_cfg)
            write_checkpoint(ckpt_path, config, state.model)
            if progress:
                progress(f"epoch {epoch + 1}/{train_cfg.epochs}  "
                         f"mean loss {mean_loss:.6g}  "
                         f"lr {train_cfg.base_lr * state.lr_scale:.2e}")
    return TrainResult(ckpt_path, csv_path, state, time.perf_counter() - t0)

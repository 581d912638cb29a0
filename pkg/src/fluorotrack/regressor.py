"""Densely connected convolutional regressor with its own gradient engine.

Maps one preprocessed projection (1 channel) to K subspace weights.  The
graph is fixed: a 3x3 stem convolution, num_blocks dense blocks (each layer
BN -> ReLU -> 3x3 conv emitting growth_rate maps, consuming the concatenation
of everything before it in the block) separated by transitions
(BN -> ReLU -> 1x1 conv at the compression ratio -> 2x2 max pool), then
global average pooling and a linear head.  Only the head carries a bias;
batch norm absorbs shifts everywhere else.

All gradients are exact reverse-mode derivatives of this discrete graph,
including the full batch-statistics term of batch norm and argmax routing
through max pooling (first-index tie break).  ReLU and the L1 loss use
subgradient 0 at their kinks.  Everything runs on plain numpy arrays;
float32 is the working precision, float64 is available for gradient checks.

Targets are trained in normalized units (per-dimension max-abs scaling from
the dataset manifest); eval-mode forward and the infer helpers multiply the
scale back in.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CheckpointFormatError

__all__ = [
    "RegressorConfig",
    "TrainConfig",
    "RegressorModel",
    "PlateauScheduler",
    "ThroughputReport",
    "channel_table",
    "build_model",
    "forward",
    "backward",
    "l1_loss",
    "train",
    "infer",
    "infer_batch",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_CHECKPOINT_MAGIC = b"RGR1"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RegressorConfig:
    input_dims: tuple = (64, 48)
    growth_rate: int = 4
    layers_per_block: int = 4
    num_blocks: int = 4
    compression: float = 0.5
    kernel_size: int = 3
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.input_dims) != 2 or any(d < 1 for d in self.input_dims):
            raise ValueError("input_dims must be two positive integers")
        for name in ("growth_rate", "layers_per_block", "num_blocks", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError("compression must be in (0, 1]")
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        divisor = 2**self.num_blocks
        if any(d % divisor != 0 for d in self.input_dims):
            raise ValueError(
                f"input_dims {self.input_dims} must be divisible by 2^num_blocks"
                f" = {divisor} (one 2x2 pool per block)"
            )

    @property
    def initial_filters(self) -> int:
        return 2 * self.growth_rate


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 2048
    lr: float = 0.1
    lr_drop_factor: float = 5.0
    plateau_rel_threshold: float = 1e-4
    plateau_patience_epochs: int = 20
    momentum: float = 0.9
    holdout_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.plateau_rel_threshold <= 0:
            raise ValueError("lr and plateau threshold must be positive")
        if self.lr_drop_factor <= 1.0:
            raise ValueError("lr_drop_factor must exceed 1")
        if self.plateau_patience_epochs < 1:
            raise ValueError("plateau patience must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")


def channel_table(cfg: RegressorConfig) -> dict:
    """Channel bookkeeping implied by the config (asserted at build time).

    Returns {"stem": c0, "blocks": [(block_out, transition_out), ...],
    "features": final channel count entering the linear head}.
    """
    c = cfg.initial_filters
    blocks = []
    for _ in range(cfg.num_blocks):
        block_out = c + cfg.layers_per_block * cfg.growth_rate
        trans_out = int(np.floor(cfg.compression * block_out))
        if trans_out < 1:
            raise ValueError("compression collapses a transition to 0 channels")
        blocks.append((block_out, trans_out))
        c = trans_out
    return {"stem": cfg.initial_filters, "blocks": blocks, "features": c}


@dataclass
class RegressorModel:
    config: RegressorConfig
    params: dict
    state: dict
    target_scale: np.ndarray
    dtype: type = np.float32


# ---------------------------------------------------------------------------
# layer primitives (forward returns a cache consumed by the backward twin)


def _conv2d_forward(x, w):
    """Same-padding stride-1 cross-correlation, NCHW; w is (O, C, kh, kw)."""
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, w)


def _conv2d_backward(dy, cache):
    x, w = cache
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    # dx: same-padding correlation of dy with the spatially flipped kernel,
    # input/output channels swapped (exact adjoint for odd k, stride 1)
    w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    dwin = np.lib.stride_tricks.sliding_window_view(dyp, (kh, kw), axis=(2, 3))
    dx = np.tensordot(dwin, w_adj, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw


def _bn_forward_train(x, gamma, beta, running_mean, running_var):
    """Batch statistics over (B, H, W); biased variance; returns updated
    running stats (momentum 0.1) alongside the cache."""
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    new_mean = (1 - _BN_MOMENTUM) * running_mean + _BN_MOMENTUM * mu
    new_var = (1 - _BN_MOMENTUM) * running_var + _BN_MOMENTUM * var
    return out, (xhat, inv, gamma), new_mean, new_var


def _bn_forward_eval(x, gamma, beta, running_mean, running_var):
    inv = 1.0 / np.sqrt(running_var + _BN_EPS)
    xhat = (x - running_mean[None, :, None, None]) * inv[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def _bn_backward(dy, cache):
    xhat, inv, gamma = cache
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    dbeta = np.sum(dy, axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    # full batch-statistics gradient in the standard reduced form
    dx = (inv[None, :, None, None] / n) * (
        n * dxhat
        - np.sum(dxhat, axis=(0, 2, 3))[None, :, None, None]
        - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def _relu_forward(x):
    return np.maximum(x, 0.0), (x > 0)


def _relu_backward(dy, mask):
    return dy * mask


def _maxpool2_forward(x):
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first index wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool2_backward(dy, cache):
    arg, shape = cache
    b, c, h, w = shape
    dflat = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dflat, arg[..., None], dy[..., None], axis=-1)
    blocks = dflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(b, c, h, w)


def _gap_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def _gap_backward(dy, shape):
    b, c, h, w = shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).astype(dy.dtype)


def _linear_forward(x, w, b):
    return x @ w.T + b, x


def _linear_backward(dy, cache, w):
    x = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error over batch and output dimensions."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def _l1_grad(pred, target):
    return np.sign(pred - target) / pred.size


# ---------------------------------------------------------------------------
# model construction


def build_model(cfg: RegressorConfig, seed: int = 0, dtype=np.float32,
                target_scale=None) -> RegressorModel:
    """Deterministic He-style initialization of every parameter tensor.

    Convolutions draw from N(0, sqrt(2 / fan_in)); the linear head from
    N(0, 1 / sqrt(fan_in)); batch norm starts at scale 1, shift 0; the head
    bias at 0.  target_scale defaults to ones (identity denormalization).
    """
    table = channel_table(cfg)
    rng = np.random.default_rng(seed)
    params: dict = {}
    state: dict = {}
    k = cfg.kernel_size

    def conv_init(name, c_in, c_out, ksize):
        fan_in = c_in * ksize * ksize
        params[name] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, ksize, ksize)
        ).astype(dtype)

    def bn_init(name, c):
        params[f"{name}.gamma"] = np.ones(c, dtype=dtype)
        params[f"{name}.beta"] = np.zeros(c, dtype=dtype)
        state[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
        state[f"{name}.running_var"] = np.ones(c, dtype=dtype)

    conv_init("stem.w", 1, cfg.initial_filters, k)
    c = cfg.initial_filters
    for b in range(1, cfg.num_blocks + 1):
        for l in range(1, cfg.layers_per_block + 1):
            c_in = c + (l - 1) * cfg.growth_rate
            bn_init(f"b{b}.l{l}.bn", c_in)
            conv_init(f"b{b}.l{l}.conv.w", c_in, cfg.growth_rate, k)
        block_out, trans_out = table["blocks"][b - 1]
        bn_init(f"t{b}.bn", block_out)
        conv_init(f"t{b}.conv.w", block_out, trans_out, 1)
        c = trans_out

    feat = table["features"]
    params["head.w"] = (
        rng.normal(0.0, 1.0 / np.sqrt(feat), (cfg.output_dim, feat))
    ).astype(dtype)
    params["head.b"] = np.zeros(cfg.output_dim, dtype=dtype)

    if target_scale is None:
        target_scale = np.ones(cfg.output_dim)
    target_scale = np.asarray(target_scale, dtype=np.float64)
    if target_scale.shape != (cfg.output_dim,) or np.any(target_scale <= 0):
        raise ValueError("target_scale must be positive with length output_dim")
    return RegressorModel(cfg, params, state, target_scale, dtype)


def _check_batch(model: RegressorModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=model.dtype)
    h, w = model.config.input_dims
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1:] != (h, w):
        raise ValueError(
            f"expected images of shape (batch, {h}, {w}), got {images.shape}"
        )
    return images[:, None, :, :]  # single input channel


def _forward_impl(model: RegressorModel, x: np.ndarray, training: bool):
    """Shared graph walk.  Returns (normalized predictions, tape).

    In training mode the tape records every cache needed by the backward
    pass and running statistics are updated in place; in eval mode the tape
    is empty and model state is untouched.
    """
    cfg = model.config
    p = model.params
    st = model.state
    tape: dict = {"dense": [], "trans": []}

    def run_bn(name, h):
        if training:
            out, cache, new_mean, new_var = _bn_forward_train(
                h, p[f"{name}.gamma"], p[f"{name}.beta"],
                st[f"{name}.running_mean"], st[f"{name}.running_var"],
            )
            st[f"{name}.running_mean"] = new_mean.astype(model.dtype)
            st[f"{name}.running_var"] = new_var.astype(model.dtype)
            return out, cache
        return _bn_forward_eval(
            h, p[f"{name}.gamma"], p[f"{name}.beta"],
            st[f"{name}.running_mean"], st[f"{name}.running_var"],
        ), None

    h, stem_cache = _conv2d_forward(x, p["stem.w"])
    tape["stem"] = stem_cache

    for b in range(1, cfg.num_blocks + 1):
        feats = [h]
        layer_tapes = []
        for l in range(1, cfg.layers_per_block + 1):
            xin = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)
            bn_out, bn_cache = run_bn(f"b{b}.l{l}.bn", xin)
            r, r_mask = _relu_forward(bn_out)
            y, conv_cache = _conv2d_forward(r, p[f"b{b}.l{l}.conv.w"])
            feats.append(y)
            layer_tapes.append((bn_cache, r_mask, conv_cache,
                                [f.shape[1] for f in feats[:-1]]))
        block_out = np.concatenate(feats, axis=1)
        tape["dense"].append((layer_tapes, [f.shape[1] for f in feats]))

        bn_out, t_bn_cache = run_bn(f"t{b}.bn", block_out)
        r, t_mask = _relu_forward(bn_out)
        narrowed, t_conv_cache = _conv2d_forward(r, p[f"t{b}.conv.w"])
        h, pool_cache = _maxpool2_forward(narrowed)
        tape["trans"].append((t_bn_cache, t_mask, t_conv_cache, pool_cache))

    feat, gap_shape = _gap_forward(h)
    tape["gap"] = gap_shape
    pred, lin_cache = _linear_forward(feat, p["head.w"], p["head.b"])
    tape["linear"] = lin_cache
    return pred, tape


def forward(model: RegressorModel, images, mode: str = "eval") -> np.ndarray:
    """Predictions for a batch.  Train mode returns normalized units and
    updates running statistics; eval mode is pure and returns raw weights
    (normalized outputs times the stored target scale)."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = _check_batch(model, images)
    pred, _ = _forward_impl(model, x, training=(mode == "train"))
    if mode == "eval":
        return pred.astype(np.float64) * model.target_scale[None, :]
    return pred


def backward(model: RegressorModel, images, targets_normalized):
    """(loss, gradients) of the L1 loss in normalized units.

    Runs a training-mode forward (updating running statistics, as the
    training loop requires), then the exact reverse sweep.  Gradients come
    back as a dict sharing keys with model.params.
    """
    x = _check_batch(model, images)
    targets = np.asarray(targets_normalized, dtype=model.dtype)
    pred, tape = _forward_impl(model, x, training=True)
    if targets.shape != pred.shape:
        raise ValueError(f"target shape {targets.shape} != {pred.shape}")
    loss = l1_loss(pred, targets)

    cfg = model.config
    p = model.params
    grads: dict = {}

    dpred = _l1_grad(pred, targets).astype(model.dtype)
    dfeat, grads["head.w"], grads["head.b"] = _linear_backward(
        dpred, tape["linear"], p["head.w"]
    )
    dh = _gap_backward(dfeat, tape["gap"])

    for b in range(cfg.num_blocks, 0, -1):
        t_bn_cache, t_mask, t_conv_cache, pool_cache = tape["trans"][b - 1]
        dnarrowed = _maxpool2_backward(dh, pool_cache)
        dr, grads[f"t{b}.conv.w"] = _conv2d_backward(dnarrowed, t_conv_cache)
        dbn = _relu_backward(dr, t_mask)
        dblock_out, grads[f"t{b}.bn.gamma"], grads[f"t{b}.bn.beta"] = \
            _bn_backward(dbn, t_bn_cache)

        layer_tapes, widths = tape["dense"][b - 1]
        # split the block-output gradient back onto the concatenated feats
        bounds = np.cumsum([0] + widths)
        d_feats = [
            np.ascontiguousarray(dblock_out[:, bounds[i]:bounds[i + 1]])
            for i in range(len(widths))
        ]
        for l in range(cfg.layers_per_block, 0, -1):
            bn_cache, r_mask, conv_cache, in_widths = layer_tapes[l - 1]
            dy = d_feats[l]
            dr, grads[f"b{b}.l{l}.conv.w"] = _conv2d_backward(dy, conv_cache)
            dbn = _relu_backward(dr, r_mask)
            dxin, grads[f"b{b}.l{l}.bn.gamma"], grads[f"b{b}.l{l}.bn.beta"] = \
                _bn_backward(dbn, bn_cache)
            in_bounds = np.cumsum([0] + in_widths)
            for i in range(len(in_widths)):
                d_feats[i] += dxin[:, in_bounds[i]:in_bounds[i + 1]]
        dh = d_feats[0]

    _, grads["stem.w"] = _conv2d_backward(dh, tape["stem"])
    return loss, grads


# ---------------------------------------------------------------------------
# optimization


class PlateauScheduler:
    """Drops the learning rate by `factor` when the best seen loss has not
    improved by a relative `rel_threshold` for `patience` consecutive steps;
    the counter resets after each drop, so a window produces one drop."""

    def __init__(self, lr: float, factor: float = 5.0,
                 rel_threshold: float = 1e-4, patience: int = 20):
        self.lr = float(lr)
        self.factor = float(factor)
        self.rel_threshold = float(rel_threshold)
        self.patience = int(patience)
        self.best = np.inf
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.rel_threshold):
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr /= self.factor
                self.stale = 0
        return self.lr


class LogRow(NamedTuple):
    epoch: int
    lr: float
    train_loss: float
    holdout_loss: float
    seconds: float


def train(model: RegressorModel, images, targets, tcfg: TrainConfig,
          log_path=None, checkpoint_path=None):
    """SGD with momentum on the L1 loss; returns (model, log rows).

    The corpus is split 80/20 (tcfg.holdout_fraction) deterministically from
    tcfg.seed and targets are normalized by the model's stored scale.  The
    returned model carries the final-epoch weights; the snapshot with the
    lowest holdout loss is written to checkpoint_path whenever it improves.
    Raises FloatingPointError if any loss goes non-finite.
    """
    from .dataset import split_dataset

    images = np.asarray(images, dtype=model.dtype)
    targets = np.asarray(targets, dtype=np.float64)
    if images.shape[0] != targets.shape[0]:
        raise ValueError("images and targets disagree on sample count")
    norm_targets = (targets / model.target_scale[None, :]).astype(model.dtype)

    train_ids, holdout_ids = split_dataset(
        images.shape[0], tcfg.holdout_fraction, tcfg.seed
    )
    rng = np.random.default_rng(tcfg.seed + 1)
    sched = PlateauScheduler(tcfg.lr, tcfg.lr_drop_factor,
                             tcfg.plateau_rel_threshold,
                             tcfg.plateau_patience_epochs)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    best_holdout = np.inf
    log: list = []

    for epoch in range(tcfg.epochs):
        tic = time.perf_counter()
        lr = sched.lr
        order = train_ids[rng.permutation(train_ids.size)]
        loss_sum = 0.0
        for start in range(0, order.size, tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            loss, grads = backward(model, images[batch], norm_targets[batch])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}"
                )
            loss_sum += loss * batch.size
            for key, g in grads.items():
                velocity[key] = tcfg.momentum * velocity[key] + g
                model.params[key] -= (lr * velocity[key]).astype(model.dtype)
        train_loss = loss_sum / order.size

        hold_pred, _ = _forward_impl(
            model, _check_batch(model, images[holdout_ids]), training=False
        )
        holdout_loss = l1_loss(hold_pred, norm_targets[holdout_ids])
        if not np.isfinite(holdout_loss):
            raise FloatingPointError(f"non-finite holdout loss at epoch {epoch}")
        log.append(LogRow(epoch, lr, float(train_loss), float(holdout_loss),
                          time.perf_counter() - tic))
        if holdout_loss < best_holdout:
            best_holdout = holdout_loss
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        sched.step(train_loss)

    if log_path is not None:
        write_training_log(log_path, log)
    return model, log


def write_training_log(path, log) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "holdout_loss", "seconds"])
        for row in log:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss),
                             repr(row.holdout_loss), repr(row.seconds)])


# ---------------------------------------------------------------------------
# inference


class ThroughputReport(NamedTuple):
    num_images: int
    total_seconds: float
    images_per_second: float
    batch_latency_mean_s: float
    batch_latency_std_s: float
    batch_latency_cv: float


def infer(model: RegressorModel, image) -> np.ndarray:
    """Raw (denormalized) weight vector for one preprocessed image."""
    return forward(model, image, mode="eval")[0]


def infer_batch(model: RegressorModel, images, batch_size: int = 64):
    """(weights, ThroughputReport) over the whole stack, timed per batch."""
    images = np.asarray(images, dtype=model.dtype)
    if images.ndim != 3:
        raise ValueError("infer_batch expects (n, H, W) images")
    outputs = []
    latencies = []
    tic = time.perf_counter()
    for start in range(0, images.shape[0], batch_size):
        t0 = time.perf_counter()
        outputs.append(forward(model, images[start:start + batch_size], "eval"))
        latencies.append(time.perf_counter() - t0)
    total = time.perf_counter() - tic
    lat = np.asarray(latencies)
    mean = float(lat.mean())
    std = float(lat.std())
    report = ThroughputReport(
        num_images=int(images.shape[0]),
        total_seconds=float(total),
        images_per_second=float(images.shape[0] / total),
        batch_latency_mean_s=mean,
        batch_latency_std_s=std,
        batch_latency_cv=float(std / mean) if mean > 0 else 0.0,
    )
    return np.vstack(outputs), report


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON header, packed float32 blob


def save_checkpoint(model: RegressorModel, path) -> None:
    cfg = model.config
    layout = []
    blobs = []
    for kind, table in (("params", model.params), ("state", model.state)):
        for key in sorted(table):
            arr = np.ascontiguousarray(table[key], dtype="<f4")
            layout.append([kind, key, list(arr.shape)])
            blobs.append(arr.tobytes())
    header = {
        "config": {
            "input_dims": list(cfg.input_dims),
            "growth_rate": cfg.growth_rate,
            "layers_per_block": cfg.layers_per_block,
            "num_blocks": cfg.num_blocks,
            "compression": cfg.compression,
            "kernel_size": cfg.kernel_size,
            "output_dim": cfg.output_dim,
        },
        "target_scale": [repr(float(v)) for v in model.target_scale],
        "layout": layout,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> RegressorModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a regressor checkpoint")
    version, head_len = struct.unpack("<II", raw[4:12])
    if version != _CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported checkpoint version {version}"
        )
    if len(raw) < 12 + head_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + head_len].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header") from exc

    cfg = RegressorConfig(**{
        **header["config"], "input_dims": tuple(header["config"]["input_dims"])
    })
    scale = np.asarray([float(v) for v in header["target_scale"]])
    params: dict = {}
    state: dict = {}
    offset = 12 + head_len
    for kind, key, shape in header["layout"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointFormatError(f"{path}: truncated parameter blob")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        (params if kind == "params" else state)[key] = arr
        offset = end
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: trailing bytes after parameters")
    return RegressorModel(cfg, params, state, scale, np.float32)

"""Training loop: optimizer, schedules, loss, config parsing, CSV logging.

The optimizer is AdamW with decoupled decay applied before the moment
update.  The learning rate warms up linearly for the first epochs, then
follows a cosine from the peak down to the floor; weight decay interpolates
linearly across the whole run.  The default loss averages binary
cross-entropy with (1 - soft Dice), which counters the heavy
foreground/background imbalance of thin-structure masks.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, TrainingAborted
from .metrics import Metrics, confusion
from .network import MMUNet, NetworkConfig
from .tensor import Tensor

LOG_HEADER = "epoch,loss,lr,wd,f1_train"


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr_init: float = 1e-3
    lr_min: float = 1e-7
    warmup_epochs: int = 2
    wd_start: float = 0.05
    wd_end: float = 0.04
    loss_kind: str = "bce_dice"
    seed: int = 42
    deep_supervision: bool = False

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ConfigError("lr_min must not exceed lr_init")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_kind not in ("bce_dice", "bce"):
            raise ConfigError(f"unknown loss_kind '{self.loss_kind}'")


def lr_at(epoch, config):
    """Linear warm-up to the peak, then cosine decay to the floor."""
    if not 0 <= epoch < config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.lr_init * (epoch + 1) / config.warmup_epochs
    span = max(config.epochs - 1 - config.warmup_epochs, 1)
    progress = (epoch - config.warmup_epochs) / span
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + math.cos(math.pi * progress))


def wd_at(epoch, config):
    """Linear interpolation from wd_start (epoch 0) to wd_end (final epoch)."""
    if not 0 <= epoch < config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.wd_start
    frac = epoch / (config.epochs - 1)
    return config.wd_start + (config.wd_end - config.wd_start) * frac


@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adamw_step(params, grads, state, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """Decoupled decay (param *= 1 - lr*wd) then bias-corrected moment update."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


def loss(pred, mask, fov=None, kind="bce_dice"):
    """Scalar training loss on a probability map in [0, 1].

    bce_dice averages mean binary cross-entropy with (1 - soft Dice) at
    equal weight; pixels outside the field of view are excluded when one is
    given.
    """
    if kind not in ("bce_dice", "bce"):
        raise ConfigError(f"unknown loss_kind '{kind}'")
    pd = pred.data
    if pd.min() < 0.0 or pd.max() > 1.0:
        raise ContractError("predictions must lie in [0, 1]")
    m = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=pd.dtype))
    if m.shape != pred.shape:
        raise ContractError(f"mask shape {m.shape} does not match prediction {pred.shape}")
    eps = 1e-7
    if fov is not None:
        wts = Tensor(np.broadcast_to(np.asarray(fov, dtype=pd.dtype), pred.shape).copy())
        n = max(float(wts.data.sum()), 1.0)
    else:
        wts = None
        n = float(pd.size)

    p = T.clamp(pred, eps, 1.0 - eps)
    per_pixel = T.scale(T.add(T.mul(m, T.log(p)),
                              T.mul(T.sub(1.0, m), T.log(T.sub(1.0, p)))), -1.0)
    if wts is not None:
        per_pixel = T.mul(per_pixel, wts)
    bce = T.scale(T.tsum(per_pixel), 1.0 / n)
    if kind == "bce":
        return bce

    pm = T.mul(pred, m)
    if wts is not None:
        inter = T.tsum(T.mul(pm, wts))
        psum = T.tsum(T.mul(pred, wts))
        msum = T.tsum(T.mul(m, wts))
    else:
        inter = T.tsum(pm)
        psum = T.tsum(pred)
        msum = T.tsum(m)
    dice = T.div(T.add(T.scale(inter, 2.0), eps), T.add(T.add(psum, msum), eps))
    return T.scale(T.add(bce, T.sub(1.0, dice)), 0.5)


# -- config files --------------------------------------------------------------

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_NET_KEYS = {"width_mult", "input_h", "input_w", "use_mmc", "use_rssg",
             "ssm_state_dim", "bidirectional_scan", "net_seed"}
_BOOL_KEYS = {"use_mmc", "use_rssg", "bidirectional_scan", "deep_supervision"}
_INT_KEYS = {"epochs", "batch_size", "warmup_epochs", "seed", "net_seed",
             "input_h", "input_w", "ssm_state_dim"}


def _parse_value(key, raw):
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean '{raw}' for key '{key}'")
    if key in _INT_KEYS:
        return int(raw)
    if key == "loss_kind":
        return raw
    if key == "width_mult" and "/" in raw:
        num, den = raw.split("/", 1)
        return float(num) / float(den)
    return float(raw)


def parse_config_file(path):
    """Parse `key = value` lines (# comments) into train and network configs."""
    train_kwargs = {}
    net_kwargs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key in _TRAIN_KEYS:
                train_kwargs[key] = _parse_value(key, raw)
            elif key in _NET_KEYS:
                net_kwargs[key] = _parse_value(key, raw)
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
    input_hw = (net_kwargs.pop("input_h", 64), net_kwargs.pop("input_w", 64))
    if "net_seed" in net_kwargs:
        net_kwargs["seed"] = net_kwargs.pop("net_seed")
    net = NetworkConfig(input_hw=input_hw, **net_kwargs)
    return TrainConfig(**train_kwargs), net


# -- the loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    log_rows: list
    best_f1: float
    best_path: str | None
    final_path: str | None


def _batch(samples, idxs):
    imgs = np.stack([samples[i].image for i in idxs])
    masks = np.stack([samples[i].mask for i in idxs])
    if all(samples[i].fov is not None for i in idxs):
        fov = np.stack([samples[i].fov for i in idxs])
    else:
        fov = None
    return imgs, masks, fov


def _downsampled_mask(mask, h, w):
    from .data import _nearest_resize

    return _nearest_resize(mask, h, w)


def train(samples, train_cfg, net_cfg, out_dir=None, model=None, progress=None):
    """Seeded mini-batch training; returns the model, the log and file paths.

    Writes `train_log.csv` plus best-F1 and final checkpoints when
    ``out_dir`` is given.  Two runs with the same seeds and thread count
    produce identical logs and checkpoints.
    """
    if not samples:
        raise ConfigError("training requires a non-empty dataset")
    if model is None:
        model = MMUNet(net_cfg)
    named = list(model.named_parameters())
    params = [p.data for _, p in named]
    state = AdamWState()
    shuffle_rng = np.random.default_rng(train_cfg.seed)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        best_path = os.path.join(out_dir, "checkpoint_best.mmun")
        final_path = os.path.join(out_dir, "checkpoint_final.mmun")
    else:
        best_path = final_path = None

    log_rows = []
    best_f1 = -1.0
    n = len(samples)
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        wd = wd_at(epoch, train_cfg)
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        batches = 0
        tp = fp = tn = fn = 0
        for start in range(0, n, train_cfg.batch_size):
            idxs = order[start:start + train_cfg.batch_size]
            imgs, masks, fov = _batch(samples, idxs)
            arts = model(Tensor(imgs))
            batch_loss = loss(arts.prob, Tensor(masks), fov=fov, kind=train_cfg.loss_kind)
            if train_cfg.deep_supervision:
                side_terms = [batch_loss]
                for z in arts.side_logits:
                    zh, zw = z.shape[2], z.shape[3]
                    side_terms.append(loss(
                        T.sigmoid(z), Tensor(_downsampled_mask(masks, zh, zw)),
                        fov=None if fov is None else _downsampled_mask(fov, zh, zw),
                        kind=train_cfg.loss_kind))
                batch_loss = T.scale(sum(side_terms[1:], side_terms[0]), 1.0 / len(side_terms))
            lval = float(batch_loss.data)
            if not np.isfinite(lval):
                ids = ", ".join(samples[i].id for i in idxs)
                raise TrainingAborted(f"non-finite loss at epoch {epoch} on batch [{ids}]")
            model.zero_grad()
            batch_loss.backward()
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for _, p in named]
            adamw_step(params, grads, state, lr, wd)
            total_loss += lval
            batches += 1
            a, b, c, d = confusion(arts.prob.data >= 0.5, masks, fov)
            tp, fp, tn, fn = tp + a, fp + b, tn + c, fn + d
        f1_train = Metrics.from_counts(tp, fp, tn, fn).f1
        row = (epoch, total_loss / batches, lr, wd, f1_train)
        log_rows.append(row)
        if progress is not None:
            progress(row)
        if f1_train > best_f1:
            best_f1 = f1_train
            if best_path is not None:
                save_checkpoint(best_path, model, net_cfg)
    if final_path is not None:
        save_checkpoint(final_path, model, net_cfg)
        with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as fh:
            fh.write(LOG_HEADER + "\n")
            for epoch, lval, lr, wd, f1 in log_rows:
                fh.write(f"{epoch},{lval!r},{lr!r},{wd!r},{f1!r}\n")
    return TrainResult(model=model, log_rows=log_rows, best_f1=best_f1,
                       best_path=best_path, final_path=final_path)

"""Objective, metrics, AdamW, the warmup/cosine/cooldown schedule, EMA and the train loop."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from .data import IMAGENET_MEAN, IMAGENET_STD, ImageDataset, augment, normalize
from .model import CSMixer, decays
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "val_acc", "ema_val_acc")


class NumericError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# objective and metrics
# --------------------------------------------------------------------------

def softmax_posterior(logits: Tensor) -> Tensor:
    return T.softmax(logits)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum_y target(y) log p(y|x)``.

    ``targets`` is either integer labels ``(B,)`` or a distribution per row ``(B, K)``.
    """
    if logits.ndim != 2:
        raise T.ShapeError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    b, k = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = one_hot(targets, k)
    targets = targets.astype(np.float64)
    if targets.shape != (b, k):
        raise T.ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each target row must be a probability distribution")
    logp = T.log_softmax(logits)
    return T.mul(T.sum(T.mul(logp, Tensor(targets))), -1.0 / b)


def predict_logits(model: CSMixer, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Forward pass without a tape over ``images`` already normalized to float."""
    outs = [model.forward(images[i:i + batch_size]).data
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs)


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    # np.argmax returns the lowest index among ties
    return 100.0 * float(np.mean(np.argmax(logits, axis=-1) == labels))


def accuracy(model: CSMixer, dataset: ImageDataset, mean=IMAGENET_MEAN, std=IMAGENET_STD,
             crop_pct: float | None = None, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        x = normalize(dataset.pixels[i:i + batch_size], mean, std, crop_pct)
        pred = np.argmax(model.forward(x).data, axis=-1)
        correct += int(np.sum(pred == dataset.labels[i:i + batch_size]))
    return 100.0 * correct / len(dataset)


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, decay=decays) -> None:
    """In-place decoupled-weight-decay Adam update with bias-corrected moments."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if decay(name) and state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# --------------------------------------------------------------------------
# learning-rate schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SchedulePlan:
    total_epochs: int = 300
    warmup_epochs: int = 20
    cooldown_epochs: int = 10
    base_lr: float = 2e-3
    warmup_lr: float = 1e-6
    min_lr: float = 1e-5
    cooldown_lr: float = 1e-5

    def __post_init__(self):
        if self.warmup_epochs + self.cooldown_epochs > self.total_epochs:
            raise ValueError("warmup + cooldown exceed total epochs")
        if min(self.warmup_epochs, self.cooldown_epochs) < 0 or self.total_epochs < 1:
            raise ValueError("epoch counts must be non-negative, total positive")


def lr_at(epoch: float, plan: SchedulePlan) -> float:
    """Learning rate for (possibly fractional) ``epoch``; training steps it per whole epoch."""
    if not 0 <= epoch < plan.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {plan.total_epochs})")
    w = plan.warmup_epochs
    if epoch < w:
        return plan.warmup_lr + (plan.base_lr - plan.warmup_lr) * epoch / w
    main = plan.total_epochs - plan.cooldown_epochs - w
    if epoch >= w + main:
        return plan.cooldown_lr
    if main <= 1:
        return plan.base_lr
    t = min((epoch - w) / (main - 1), 1.0)
    return plan.min_lr + 0.5 * (plan.base_lr - plan.min_lr) * (1.0 + math.cos(math.pi * t))


# --------------------------------------------------------------------------
# EMA
# --------------------------------------------------------------------------

@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.99996

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")

    @classmethod
    def of(cls, params: dict[str, np.ndarray], decay: float) -> "EmaState":
        return cls({k: np.array(v, dtype=np.float64) for k, v in params.items()}, decay)


def ema_update(ema: EmaState, params: dict[str, np.ndarray]) -> EmaState:
    g = ema.decay
    for k, s in ema.shadow.items():
        p = params[k]
        if p.shape != s.shape:
            raise T.ShapeError(f"EMA shadow {k!r} {s.shape} vs parameter {p.shape}")
        s *= g
        s += (1.0 - g) * p
    return ema


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class Recipe:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float | None = None  # None: 1e-3 at batch 64, scaled linearly with batch
    warmup_epochs: int = 2
    cooldown_epochs: int = 0
    warmup_lr: float = 1e-6
    min_lr: float = 1e-5
    cooldown_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.99
    grad_clip: float | None = None
    pad_crop: int = 4
    flip: bool = True
    eval_crop_pct: float = 1.0
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    @property
    def lr(self) -> float:
        return self.base_lr if self.base_lr is not None else 1e-3 * self.batch_size / 64

    def schedule(self) -> SchedulePlan:
        return SchedulePlan(self.epochs, self.warmup_epochs, self.cooldown_epochs, self.lr,
                            self.warmup_lr, self.min_lr, self.cooldown_lr)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        d = dict(d)
        for k in ("mean", "std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TrainResult:
    metrics: list[dict]
    model: CSMixer
    ema: EmaState
    opt: OptimizerState
    out_dir: Path | None


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[c]) for c in METRICS_COLUMNS[1:]])


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{"epoch": int(r["epoch"]), **{c: float(r[c]) for c in METRICS_COLUMNS[1:]}}
            for r in rows]


def _eval(model: CSMixer, ds: ImageDataset, recipe: Recipe) -> float:
    return accuracy(model, ds, recipe.mean, recipe.std, recipe.eval_crop_pct)


def _with_arrays(model: CSMixer, arrays: dict[str, np.ndarray], fn):
    saved = {k: t.data for k, t in model.params.items()}
    try:
        for k, t in model.params.items():
            t.data = arrays[k]
        return fn()
    finally:
        for k, t in model.params.items():
            t.data = saved[k]


def _snapshot(model, ema, opt, rng, epoch, best, recipe, extra=None) -> Checkpoint:
    header = dict(extra or {})
    header.update({"epoch": epoch, "best_val_acc": best, "optimizer": opt.hyper(),
                   "ema_decay": ema.decay, "rng_state": rng.bit_generator.state,
                   "recipe": recipe.to_dict()})
    return Checkpoint(
        model.config,
        {k: v.data.copy() for k, v in model.params.items()},
        ema={k: v.copy() for k, v in ema.shadow.items()},
        adam_m={k: opt.m[k].copy() for k in model.params if k in opt.m} if opt.m else None,
        adam_v={k: opt.v[k].copy() for k in model.params if k in opt.v} if opt.v else None,
        header=header,
    )


def restore(ckpt: Checkpoint, model: CSMixer, recipe: Recipe):
    """Rebuild (ema, opt, rng) from a checkpoint and load its parameters into ``model``."""
    load_into(model, ckpt)
    h = ckpt.header
    ema = EmaState({k: v.copy() for k, v in (ckpt.ema or ckpt.params).items()},
                   h.get("ema_decay", recipe.ema_decay))
    oh = h.get("optimizer", {})
    opt = OptimizerState(lr=oh.get("lr", recipe.lr), beta1=oh.get("beta1", recipe.beta1),
                         beta2=oh.get("beta2", recipe.beta2), eps=oh.get("eps", recipe.eps),
                         weight_decay=oh.get("weight_decay", recipe.weight_decay),
                         step=oh.get("step", 0),
                         m={k: v.copy() for k, v in (ckpt.adam_m or {}).items()},
                         v={k: v.copy() for k, v in (ckpt.adam_v or {}).items()})
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return ema, opt, rng


def train(model: CSMixer, train_set: ImageDataset, val_set: ImageDataset, recipe: Recipe,
          rng: np.random.Generator, out_dir=None, resume: bool = False,
          stop_after: int | None = None, extra: dict | None = None) -> TrainResult:
    """Minibatch AdamW training with per-epoch schedule, EMA and checkpoints.

    ``out_dir`` receives ``metrics.csv``, ``last.ckpt`` (every epoch), ``best.ckpt``
    and ``final.ckpt``. With ``resume`` the run continues from ``last.ckpt``.
    ``stop_after`` ends the run once that many epochs are complete (an interruption).
    ``extra`` is merged into every checkpoint header.
    """
    cfg = model.config
    exp = tuple(cfg.image_size)
    for name, ds in (("train", train_set), ("val", val_set)):
        if ds.image_size != exp:
            raise ValueError(f"{name} images are {ds.image_size}, model expects {exp}")
        if ds.num_classes > cfg.num_classes:
            raise ValueError(f"{name} set has {ds.num_classes} classes, model has {cfg.num_classes}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and val sets must be non-empty")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    plan = recipe.schedule()
    metrics: list[dict] = []
    start = 0
    best = -1.0
    if resume:
        if out is None:
            raise ValueError("resume needs an output directory")
        ckpt = load_checkpoint(out / "last.ckpt")
        ema, opt, rng = restore(ckpt, model, recipe)
        start = ckpt.epoch
        best = float(ckpt.header.get("best_val_acc", -1.0))
        if (out / "metrics.csv").exists():
            metrics = [r for r in read_metrics(out / "metrics.csv") if r["epoch"] < start]
    else:
        ema = EmaState.of(model.state_arrays(), recipe.ema_decay)
        opt = OptimizerState(lr=recipe.lr, beta1=recipe.beta1, beta2=recipe.beta2,
                             eps=recipe.eps, weight_decay=recipe.weight_decay)

    n = len(train_set)
    bs = recipe.batch_size
    end = recipe.epochs if stop_after is None else min(recipe.epochs, stop_after)
    for epoch in range(start, end):
        opt.lr = lr_at(epoch, plan)
        perm = rng.permutation(n)
        loss_sum = 0.0
        for bi, lo in enumerate(range(0, n, bs)):
            idx = perm[lo:lo + bs]
            pix = augment(train_set.pixels[idx], rng, recipe.pad_crop, recipe.flip)
            x = normalize(pix, recipe.mean, recipe.std)
            model.zero_grad()
            with T.Tape() as tape:
                logits = model.forward(x, train=True, rng=rng)
                loss = cross_entropy(logits, train_set.labels[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericError(f"non-finite loss {lv} at epoch {epoch} batch {bi}")
            tape.backward(loss)
            tape.clear()  # drop saved activations before the next forward
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            if recipe.grad_clip:
                clip_grad_norm(grads, recipe.grad_clip)
            adamw_step({k: t.data for k, t in model.params.items()}, grads, opt)
            ema_update(ema, {k: t.data for k, t in model.params.items()})
            loss_sum += lv * len(idx)
        train_loss = loss_sum / n
        val_acc = _eval(model, val_set, recipe)
        ema_acc = _with_arrays(model, ema.shadow, lambda: _eval(model, val_set, recipe))
        row = {"epoch": epoch, "lr": opt.lr, "train_loss": train_loss,
               "val_acc": val_acc, "ema_val_acc": ema_acc}
        metrics.append(row)
        log.info("epoch %d lr %.3g loss %.4f val %.2f ema %.2f",
                 epoch, opt.lr, train_loss, val_acc, ema_acc)
        improved = val_acc > best
        best = max(best, val_acc)
        if out is not None:
            snap = _snapshot(model, ema, opt, rng, epoch + 1, best, recipe, extra)
            write_metrics(out / "metrics.csv", metrics)
            save_checkpoint(out / "last.ckpt", snap)
            if improved:
                save_checkpoint(out / "best.ckpt", snap)
    if out is not None and end == recipe.epochs and metrics:
        save_checkpoint(out / "final.ckpt", _snapshot(model, ema, opt, rng, end, best, recipe, extra))
    return TrainResult(metrics, model, ema, opt, out)

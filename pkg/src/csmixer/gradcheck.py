"""End-to-end gradient check of the training loss against central differences."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import normalize, synth_dataset
from .model import CSMixer
from .training import cross_entropy

FD_STEP = 1e-5
# below this magnitude the error is taken as absolute; FD rounding noise is ~3e-11 here
REL_FLOOR = 1e-5


@dataclass
class GradSample:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        a, n = self.analytic, self.numeric
        return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


@dataclass
class GradcheckReport:
    samples: list[GradSample] = field(default_factory=list)
    nonfinite: list[str] = field(default_factory=list)
    tol: float = 1e-5

    @property
    def max_rel_err(self) -> float:
        return max((s.rel_err for s in self.samples), default=0.0)

    @property
    def worst(self) -> GradSample | None:
        return max(self.samples, key=lambda s: s.rel_err, default=None)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_err < self.tol

    def to_text(self) -> str:
        lines = [f"sampled {len(self.samples)} scalars across "
                 f"{len({s.name for s in self.samples})} tensors",
                 f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e})"]
        if self.worst is not None:
            w = self.worst
            lines.append(f"worst: {w.name}[{w.index}] analytic {w.analytic:.9e} "
                         f"numeric {w.numeric:.9e}")
        for name in self.nonfinite:
            lines.append(f"non-finite value in {name}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def loss_fn(model: CSMixer, x: np.ndarray, labels: np.ndarray):
    return cross_entropy(model.forward(x), labels)


def gradcheck_model(cfg: ModelConfig, seed: int = 0, samples: int = 200, batch: int = 2,
                    step: float = FD_STEP, tol: float = 1e-5) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    model = CSMixer(cfg, rng)
    ds = synth_dataset(batch, cfg.num_classes, cfg.image_size, seed=seed)
    x = normalize(ds.pixels)
    labels = ds.labels
    model.zero_grad()
    with T.Tape() as tape:
        loss = loss_fn(model, x, labels)
    tape.backward(loss)

    names = list(model.params)
    sizes = np.array([model.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.sort(rng.choice(int(offsets[-1]), size=min(samples, int(offsets[-1])), replace=False))
    report = GradcheckReport(tol=tol)
    for flat in picks:
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[ti], int(flat - offsets[ti])
        p = model.params[name]
        grad = p.grad.reshape(-1)[idx] if p.grad is not None else 0.0
        view = p.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + step
        lp = loss_fn(model, x, labels).item()
        view[idx] = orig - step
        lm = loss_fn(model, x, labels).item()
        view[idx] = orig
        num = (lp - lm) / (2 * step)
        if not (math.isfinite(num) and math.isfinite(grad)):
            report.nonfinite.append(f"{name}[{idx}]")
            continue
        report.samples.append(GradSample(name, idx, float(grad), float(num)))
    return report

"""Closed-form parameter and MAC accounting.

Counts never allocate tensors, so every variant (including L at 224x224) is
profiled instantly. One MAC is reported as one FLOP. Elementwise work, norms,
pooling and softmax are not counted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .config import PUBLISHED, VARIANTS, ModelConfig, is_canonical, stage_plans
from .model import EMBED_KERNELS, MERGE_KERNELS, embed_channels


@dataclass(frozen=True)
class CostRow:
    layer: str
    path: str
    params: int
    macs: int


@dataclass
class CostReport:
    config: ModelConfig
    rows: list[CostRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def totals(self) -> tuple[int, int]:
        return self.params, self.macs

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "path", "params", "macs"])
        for r in self.rows:
            w.writerow([r.layer, r.path, r.params, r.macs])
        w.writerow(["total", "", self.params, self.macs])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r.path) for r in self.rows] + [5])
        lines = [f"{'layer':<12} {'path':<{width}} {'params':>14} {'MACs':>16}"]
        for r in self.rows:
            lines.append(f"{r.layer:<12} {r.path:<{width}} {r.params:>14,} {r.macs:>16,}")
        lines.append(f"{'total':<12} {'':<{width}} {self.params:>14,} {self.macs:>16,}")
        lines.append(f"= {self.params / 1e6:.2f} M params, {self.macs / 1e9:.3f} GMACs")
        return "\n".join(lines)


def _conv(k: int, cin: int, cout: int, out_positions: int) -> tuple[int, int]:
    return k * k * cin * cout + cout, out_positions * k * k * cin * cout


def mixer_layer_costs(c: int, m: int, d: int, L: int, hw: tuple[int, int],
                      mlp_ratio: int = 4, mlp_affines: int = 2) -> dict[str, tuple[int, int]]:
    """(params, MACs) of the sub-blocks of one mixer layer at stage width ``c``."""
    tokens = hw[0] * hw[1]
    groups = tokens // L
    ld = L * d
    token_params = 2 * c * c + 2 * c + m * (2 * c * d + c + d) + m * (ld * ld + ld)
    # u and o projections per token; per head: c->d, the (Ld)x(Ld) map per group, d->c
    token_macs = tokens * 2 * c * c + groups * m * (L * c * d + ld * ld + L * d * c)
    hidden = mlp_ratio * c
    widths = [c] + [hidden] * (mlp_affines - 1) + [c]
    mlp_params = sum(a * b + b for a, b in zip(widths, widths[1:]))
    mlp_macs = tokens * sum(a * b for a, b in zip(widths, widths[1:]))
    return {
        "norm": (4 * c, 0),
        "token_mixer": (token_params, token_macs),
        "channel_mlp": (mlp_params, mlp_macs),
    }


def profile(cfg: ModelConfig) -> CostReport:
    rep = CostReport(cfg)
    h, w = cfg.image_size
    pos = (h // 4) * (w // 4)
    for k, co in zip(EMBED_KERNELS, embed_channels(cfg.base_dim)):
        p, m = _conv(k, cfg.in_channels, co, pos)
        rep.rows.append(CostRow("embed", f"embed.conv{k}", p, m))
    for plan in stage_plans(cfg):
        L = plan.group ** 2
        for j, mode in enumerate(plan.modes):
            costs = mixer_layer_costs(plan.dim, plan.heads, cfg.rank, L, plan.hw,
                                      cfg.mlp_ratio, cfg.mlp_affines)
            base = f"stages.{plan.index}.layers.{j}"
            for name, (p, m) in costs.items():
                rep.rows.append(CostRow(name, f"{base}.{name}[{mode}]", p, m))
        if plan.index < 3:
            out_pos = (plan.hw[0] // 2) * (plan.hw[1] // 2)
            for k in MERGE_KERNELS:
                p, m = _conv(k, plan.dim, plan.dim, out_pos)
                rep.rows.append(CostRow("merge", f"merges.{plan.index}.conv{k}", p, m))
    c4 = cfg.stage_dim(3)
    rep.rows.append(CostRow("head", "head", c4 * cfg.num_classes + cfg.num_classes,
                            c4 * cfg.num_classes))
    return rep


def count_params(cfg: ModelConfig) -> CostReport:
    return profile(cfg)


def count_macs(cfg: ModelConfig) -> CostReport:
    return profile(cfg)


def rel_err(computed: float, reference: float) -> float:
    return abs(computed - reference) / reference


@dataclass(frozen=True)
class AuditRow:
    variant: str
    params: int
    macs: int
    ref_params_m: float
    ref_gmacs: float

    @property
    def params_rel_err(self) -> float:
        return rel_err(self.params / 1e6, self.ref_params_m)

    @property
    def macs_rel_err(self) -> float:
        return rel_err(self.macs / 1e9, self.ref_gmacs)


@dataclass
class Audit:
    rows: list[AuditRow]
    mlp_affines: int
    mean_param_err: dict[int, float]

    def passes(self, param_tol: float = 0.05, mac_tol: float = 0.10) -> bool:
        return all(r.params_rel_err <= param_tol and r.macs_rel_err <= mac_tol for r in self.rows)

    def to_text(self, param_tol: float = 0.05, mac_tol: float = 0.10) -> str:
        lines = [f"{'variant':<8}{'params (M)':>12}{'ref':>8}{'rel_err':>9}  "
                 f"{'GMACs':>8}{'ref':>8}{'rel_err':>9}  status"]
        for r in self.rows:
            ok = r.params_rel_err <= param_tol and r.macs_rel_err <= mac_tol
            lines.append(
                f"{r.variant:<8}{r.params / 1e6:>12.3f}{r.ref_params_m:>8.1f}{r.params_rel_err:>9.2%}  "
                f"{r.macs / 1e9:>8.3f}{r.ref_gmacs:>8.1f}{r.macs_rel_err:>9.2%}  "
                f"{'PASS' if ok else 'FAIL'}")
        readings = ", ".join(
            f"{n} affines: {e:.2%}" for n, e in sorted(self.mean_param_err.items()))
        lines.append(f"channel MLP reading: {self.mlp_affines} affine maps "
                     f"(mean param rel_err {readings})")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "params", "ref_params_m", "params_rel_err",
                    "macs", "ref_gmacs", "macs_rel_err"])
        for r in self.rows:
            w.writerow([r.variant, r.params, r.ref_params_m, f"{r.params_rel_err:.6f}",
                        r.macs, r.ref_gmacs, f"{r.macs_rel_err:.6f}"])
        return buf.getvalue()


def audit_published(variants=("T", "S", "B", "L")) -> Audit:
    """Compare all variants against the published table under both channel-MLP readings.

    The reading with the lower mean parameter error is the one reported.
    """
    by_reading: dict[int, list[AuditRow]] = {}
    for n in (2, 3):
        rows = []
        for v in variants:
            cfg = VARIANTS[v].replace(mlp_affines=n)
            rep = profile(cfg)
            rows.append(AuditRow(v, rep.params, rep.macs, PUBLISHED[v]["params_m"], PUBLISHED[v]["gflops"]))
        by_reading[n] = rows
    mean_err = {n: sum(r.params_rel_err for r in rows) / len(rows) for n, rows in by_reading.items()}
    best = min(mean_err, key=lambda n: (mean_err[n], n))
    return Audit(by_reading[best], best, mean_err)


def compare_to_published(cfg: ModelConfig) -> AuditRow | None:
    if not is_canonical(cfg):
        return None
    rep = profile(cfg)
    ref = PUBLISHED[cfg.variant]
    return AuditRow(cfg.variant, rep.params, rep.macs, ref["params_m"], ref["gflops"])

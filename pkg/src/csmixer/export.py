"""Spatial weight grids of the token-mixing map, one per (stage, LA/GA) pair."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ModelConfig, stage_plans


def grid_slice(params: dict[str, np.ndarray], stage: int, layer: int, g: int) -> np.ndarray:
    """First head, input channel 0, output (token 0, channel 0): ``mix[0, :, 0, 0, 0]`` as g x g."""
    w = params[f"stages.{stage}.layers.{layer}.token.mix.weight"]
    return np.asarray(w)[0, :, 0, 0, 0].reshape(g, g)


def to_pgm(grid: np.ndarray) -> bytes:
    """8-bit P5 image, min-max scaled per grid; a constant grid maps to 128."""
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        pix = np.rint((grid - lo) / (hi - lo) * 255.0)
    else:
        pix = np.full(grid.shape, 128.0)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.astype(np.uint8).tobytes()


def to_csv(grid: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid)


def export_weight_grids(params: dict, config: ModelConfig, outdir) -> dict:
    """Write ``stage{i}_{la,ga}.{csv,pgm}`` and ``manifest.json`` into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    arrays = {k: getattr(v, "data", v) for k, v in params.items()}
    files, notes = [], []
    for plan in stage_plans(config):
        for mode in ("LA", "GA"):
            try:
                layer = plan.modes.index(mode)
            except ValueError:
                notes.append(f"stage {plan.index + 1}: no {mode} layer "
                             f"(depth {len(plan.modes)}), grid skipped")
                continue
            grid = grid_slice(arrays, plan.index, layer, plan.group)
            stem = f"stage{plan.index + 1}_{mode.lower()}"
            (outdir / f"{stem}.csv").write_text(to_csv(grid))
            (outdir / f"{stem}.pgm").write_bytes(to_pgm(grid))
            files.append({"stage": plan.index + 1, "mode": mode, "layer": layer,
                          "grid": [plan.group, plan.group],
                          "csv": f"{stem}.csv", "pgm": f"{stem}.pgm"})
    manifest = {"files": files, "notes": notes}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)

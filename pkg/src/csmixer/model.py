"""CS-Mixer network: cross-scale embedding, mixer stages, patch merging, head.

Activations are channels-last, ``(B, h, w, c)``. Parameters live in one flat,
ordered ``{name: Tensor}`` dict so that counting, checkpointing and the
optimizer all see the same names.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig, StagePlan, stage_plans
from .tensor import Tensor

EMBED_KERNELS = (4, 8, 16, 32)
MERGE_KERNELS = (2, 4)
INIT_STD = 0.02
MIX_INIT_STD = 1e-4
MIX_INIT_BIAS = 1.0

LA_PATTERN = T.RearrangeSpec.parse("b (nh g1) (nw g2) c -> b (nh nw) (g1 g2) c")
GA_PATTERN = T.RearrangeSpec.parse("b (g1 nh) (g2 nw) c -> b (nh nw) (g1 g2) c")


def embed_channels(c: int) -> tuple[int, int, int, int]:
    if c % 8:
        raise ValueError(f"embedding width {c} must be divisible by 8")
    return c // 2, c // 4, c // 8, c // 8


def _pad(k: int, stride: int) -> int:
    return (k - stride) // 2


# --------------------------------------------------------------------------
# parameter construction
# --------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor's name and shape, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.in_channels
    for k, co in zip(EMBED_KERNELS, embed_channels(cfg.base_dim)):
        shapes[f"embed.conv{k}.weight"] = (k, k, cin, co)
        shapes[f"embed.conv{k}.bias"] = (co,)
    for plan in stage_plans(cfg):
        c, m, d, L = plan.dim, plan.heads, cfg.rank, plan.group ** 2
        hidden = cfg.mlp_ratio * c
        for j in range(len(plan.modes)):
            p = f"stages.{plan.index}.layers.{j}."
            shapes[p + "norm1.gain"] = (c,)
            shapes[p + "norm1.bias"] = (c,)
            shapes[p + "token.u.weight"] = (c, c)
            shapes[p + "token.u.bias"] = (c,)
            shapes[p + "token.v.weight"] = (c, m * d)
            shapes[p + "token.v.bias"] = (m * d,)
            shapes[p + "token.mix.weight"] = (m, L, d, L, d)
            shapes[p + "token.mix.bias"] = (m, L, d)
            shapes[p + "token.vt.weight"] = (m * d, c)
            shapes[p + "token.vt.bias"] = (m, c)
            shapes[p + "token.o.weight"] = (c, c)
            shapes[p + "token.o.bias"] = (c,)
            shapes[p + "norm2.gain"] = (c,)
            shapes[p + "norm2.bias"] = (c,)
            widths = [c] + [hidden] * (cfg.mlp_affines - 1) + [c]
            for a in range(cfg.mlp_affines):
                shapes[p + f"mlp.fc{a + 1}.weight"] = (widths[a], widths[a + 1])
                shapes[p + f"mlp.fc{a + 1}.bias"] = (widths[a + 1],)
        if plan.index < 3:
            for k in MERGE_KERNELS:
                shapes[f"merges.{plan.index}.conv{k}.weight"] = (k, k, c, c)
                shapes[f"merges.{plan.index}.conv{k}.bias"] = (c,)
    c4 = cfg.stage_dim(3)
    shapes["head.weight"] = (c4, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("token.mix.weight"):
            arr = trunc_normal(rng, shape, MIX_INIT_STD)
        elif name.endswith("token.mix.bias"):
            arr = np.full(shape, MIX_INIT_BIAS)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = trunc_normal(rng, shape, INIT_STD)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices/kernels only, never to biases or norm gains."""
    return name.endswith(".weight")


def scope(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def cross_scale_embed(image: Tensor, p: dict[str, Tensor], stride: int = 4,
                      kernels=EMBED_KERNELS) -> Tensor:
    """Parallel stride-``stride`` convolutions of growing kernel size, concatenated on channels."""
    h, w = image.shape[-3], image.shape[-2]
    if h % stride or w % stride:
        raise T.ShapeError(f"input {h}x{w} not divisible by stride {stride}")
    outs = [T.conv2d(image, p[f"conv{k}.weight"], stride, _pad(k, stride), p[f"conv{k}.bias"])
            for k in kernels]
    return T.concat(outs, axis=-1)


def patch_merge(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise T.ShapeError(f"patch merge needs even spatial dims, got {h}x{w}")
    return cross_scale_embed(x, p, stride=2, kernels=MERGE_KERNELS)


def aggregate(x: Tensor, g: int, mode: str) -> Tensor:
    """Group tokens of ``x[(B,) h, w, c]`` into ``(N, g*g, c)`` sequences, LA or GA."""
    spec = _pattern(mode)
    batched = x.ndim == 4
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    h, w = x.shape[1], x.shape[2]
    if g < 1 or h % g or w % g:
        raise T.ShapeError(f"group size {g} does not divide {h}x{w}")
    out = T.rearrange(x, spec, g1=g, g2=g)
    return out if batched else T.reshape(out, out.shape[1:])


def disaggregate(y: Tensor, g: int, mode: str, hw: tuple[int, int]) -> Tensor:
    """Exact inverse of :func:`aggregate`."""
    spec = _pattern(mode).inverse()
    batched = y.ndim == 4
    if not batched:
        y = T.reshape(y, (1,) + y.shape)
    h, w = hw
    out = T.rearrange(y, spec, g1=g, g2=g, nh=h // g, nw=w // g)
    return out if batched else T.reshape(out, out.shape[1:])


def _pattern(mode: str) -> T.RearrangeSpec:
    if mode == "LA":
        return LA_PATTERN
    if mode == "GA":
        return GA_PATTERN
    raise ValueError(f"aggregation mode must be 'LA' or 'GA', got {mode!r}")


def cs_mixer_op(xt: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Low-rank spatial-channel token mixing of grouped tokens ``xt[..., L, c]``.

    Per head n: project channels to rank d, apply the dense (L*d)x(L*d) map
    ``mix[n]`` over the whole group, project back to c; heads are summed, gate
    ``u`` elementwise, then the output projection.
    """
    m, L, d = p["mix.weight"].shape[:3]
    c = p["u.weight"].shape[0]
    if xt.shape[-2:] != (L, c):
        raise T.ShapeError(f"cs_mixer_op: groups {xt.shape[-2:]} vs params (L={L}, c={c})")
    lead = xt.shape[:-2]
    x3 = T.reshape(xt, (-1, L, c))
    u = T.linear(x3, p["u.weight"], p["u.bias"])
    v = T.linear(x3, p["v.weight"], p["v.bias"])  # (P, L, m*d)
    v = T.rearrange(v, "p l (m d) -> p m (l d)", m=m, d=d)
    w = T.reshape(p["mix.weight"], (m, L * d, L * d))
    v = T.einsum("pmi,mij->pmj", v, w)
    v = T.add_trailing(v, T.reshape(p["mix.bias"], (m, L * d)))
    v = T.rearrange(v, "p m (l d) -> p l (m d)", m=m, d=d)
    v = T.linear(v, p["vt.weight"], T.sum(p["vt.bias"], axis=0))
    y = T.linear(T.mul(u, v), p["o.weight"], p["o.bias"])
    return T.reshape(y, lead + (L, c))


def channel_mlp(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    n = 1
    while f"fc{n + 1}.weight" in p:
        n += 1
    for a in range(1, n + 1):
        x = T.linear(x, p[f"fc{a}.weight"], p[f"fc{a}.bias"])
        if a < n:
            x = T.gelu(x)
    return x


def _drop_path(branch: Tensor, drop_prob: float, train: bool, rng) -> Tensor:
    if drop_prob <= 0.0:
        return branch
    if not train:
        return T.mul(branch, 1.0 - drop_prob)
    b = branch.shape[0]
    keep = (rng.random(b) >= drop_prob).astype(np.float64)
    mask = np.broadcast_to(keep.reshape((b,) + (1,) * (branch.ndim - 1)), branch.shape)
    return T.mul(branch, Tensor(mask))


def mixer_layer(x: Tensor, p: dict[str, Tensor], mode: str, g: int,
                drop_prob: float = 0.0, train: bool = False, rng=None) -> Tensor:
    """Pre-norm residual block: token mixer then channel MLP, on ``x[B, h, w, c]``."""
    hw = (x.shape[1], x.shape[2])
    t = T.layer_norm(x, p["norm1.gain"], p["norm1.bias"])
    t = aggregate(t, g, mode)
    t = cs_mixer_op(t, scope(p, "token."))
    t = disaggregate(t, g, mode, hw)
    x = T.add(x, _drop_path(t, drop_prob, train, rng))
    t = T.layer_norm(x, p["norm2.gain"], p["norm2.bias"])
    t = channel_mlp(t, scope(p, "mlp."))
    return T.add(x, _drop_path(t, drop_prob, train, rng))


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

class CSMixer:
    """A CS-Mixer network built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int | None = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.plans: list[StagePlan] = stage_plans(config)
        self.params: dict[str, Tensor] = init_params(config, rng)
        total = sum(config.depths)
        rates = np.linspace(0.0, config.drop_path_rate, total) if total else []
        self.drop_probs = [float(r) for r in rates]

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=np.float64)

    def forward_features(self, images, train: bool = False, rng=None,
                         trace: list | None = None) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        p = self.params
        x = cross_scale_embed(x, scope(p, "embed."))
        li = 0
        for plan in self.plans:
            if trace is not None:
                trace.append(x.shape[-3:])
            for j, mode in enumerate(plan.modes):
                x = mixer_layer(x, scope(p, f"stages.{plan.index}.layers.{j}."), mode,
                                plan.group, self.drop_probs[li], train, rng)
                li += 1
            if plan.index < 3:
                x = patch_merge(x, scope(p, f"merges.{plan.index}."))
        return x

    def forward(self, images, train: bool = False, rng=None) -> Tensor:
        """Logits ``(B, K)`` for ``(B, H, W, C)`` input or ``(K,)`` for a single image."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        exp = tuple(self.config.image_size) + (self.config.in_channels,)
        if x.shape[1:] != exp:
            raise T.ShapeError(f"expected images of shape {exp}, got {x.shape[1:]}")
        if train and rng is None and self.config.drop_path_rate > 0:
            raise ValueError("stochastic depth in training mode needs an rng")
        feats = self.forward_features(x, train, rng)
        pooled = T.mean(feats, axis=(1, 2))
        logits = T.linear(pooled, self.params["head.weight"], self.params["head.bias"])
        return T.reshape(logits, logits.shape[1:]) if single else logits

    __call__ = forward

    def stage_shapes(self, images) -> list[tuple[int, ...]]:
        trace: list = []
        self.forward_features(images, trace=trace)
        return trace

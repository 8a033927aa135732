"""The segmentation network: shallow residual encoder (output stride 16),
pyramid pooling over the trunk, and a two-deconvolution decoder with three
long skip connections into the matching-resolution decoder features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var

DEFAULT_PPM_FACTORS = (6, 12, 18, 24)


@dataclass(frozen=True)
class NetConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    ppm_factors: tuple = DEFAULT_PPM_FACTORS
    num_classes: int = 2
    input_hw: tuple = (480, 640)
    ppm_pool: str = "avg"  # or "max"

    def __post_init__(self):
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels must have exactly three entries")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        facs = tuple(self.ppm_factors)
        if not facs or any(f <= 0 for f in facs) or list(facs) != sorted(set(facs)):
            raise ValueError(f"ppm_factors must be strictly increasing positive, got {facs}")
        h, w = self.input_hw
        if h % 16 or w % 16:
            raise ValueError(f"input_hw must be divisible by 16, got {h}x{w}")
        if self.ppm_pool not in ("avg", "max"):
            raise ValueError(f"ppm_pool must be 'avg' or 'max', got {self.ppm_pool!r}")
        if self.stage_channels[2] < 4:
            raise ValueError("third stage needs >= 4 channels for the pyramid branches")


# Reduced widths keep the acceptance suite desk-sized; full widths mirror
# the unshrunk encoder.
def reduced_config(**kw) -> NetConfig:
    return NetConfig(**{"stem_channels": 8, "stage_channels": (8, 16, 32), **kw})


def full_config(**kw) -> NetConfig:
    return NetConfig(**{"stem_channels": 64, "stage_channels": (64, 128, 256), **kw})


class Params:
    """Flat name -> ndarray store plus lazily-created Adam moment buffers."""

    def __init__(self, values: dict):
        self.values = values
        self.adam_m: dict = {}
        self.adam_v: dict = {}

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self):
        return sorted(self.values)

    def trainable_names(self):
        return [n for n in sorted(self.values) if not n.endswith(("running_mean", "running_var"))]

    @staticmethod
    def is_decayed(name: str) -> bool:
        # Decoupled weight decay touches conv/deconv kernels only.
        return name.endswith(".w")


def _conv_shapes(cfg: NetConfig) -> dict:
    """Every parameter name and shape implied by the config."""
    c1, c2, c3 = cfg.stage_channels
    sc = cfg.stem_channels
    br = c3 // 4
    shapes = {}

    def bn(prefix, c):
        shapes[f"{prefix}.gamma"] = (c,)
        shapes[f"{prefix}.beta"] = (c,)
        shapes[f"{prefix}.running_mean"] = (c,)
        shapes[f"{prefix}.running_var"] = (c,)

    shapes["stem.conv.w"] = (sc, 3, 7, 7)
    bn("stem.bn", sc)

    chans = {"stage1": (sc, c1), "stage2": (c1, c2), "stage3": (c2, c3)}
    for stage, (cin, cout) in chans.items():
        stride = 1 if stage == "stage1" else 2
        for blk in (1, 2):
            bin_ = cin if blk == 1 else cout
            shapes[f"{stage}.block{blk}.conv1.w"] = (cout, bin_, 3, 3)
            bn(f"{stage}.block{blk}.bn1", cout)
            shapes[f"{stage}.block{blk}.conv2.w"] = (cout, cout, 3, 3)
            bn(f"{stage}.block{blk}.bn2", cout)
            if blk == 1 and (stride != 1 or cin != cout):
                shapes[f"{stage}.block1.proj.w"] = (cout, cin, 1, 1)
                bn(f"{stage}.block1.proj_bn", cout)

    for i in range(len(cfg.ppm_factors)):
        shapes[f"ppm.branch{i}.conv.w"] = (br, c3, 1, 1)
        shapes[f"ppm.branch{i}.conv.b"] = (br,)
    fuse_in = c3 + br * len(cfg.ppm_factors)
    shapes["ppm.fuse.w"] = (c3, fuse_in, 1, 1)
    shapes["ppm.fuse.b"] = (c3,)

    shapes["dec1.deconv.w"] = (c3, c2, 4, 4)
    bn("dec1.bn", c2)
    shapes["dec2.deconv.w"] = (c2, c1, 4, 4)
    bn("dec2.bn", c1)

    shapes["skip_stem.w"] = (c1, sc, 1, 1)
    shapes["skip_stage1.w"] = (c1, c1, 1, 1)
    shapes["skip_stage2.w"] = (c2, c2, 1, 1)

    shapes["head.w"] = (cfg.num_classes, c1, 1, 1)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def encoder_param_names(cfg: NetConfig):
    """Names of the pretrainable encoder (stem + residual stages)."""
    return [n for n in _conv_shapes(cfg) if n.split(".")[0] in ("stem", "stage1", "stage2", "stage3")]


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Params:
    """He-normal conv kernels, unit-gamma/zero-beta batch norm, zero biases."""
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in sorted(_conv_shapes(cfg).items()):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            values[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif name.endswith((".b", ".beta", ".running_mean")):
            values[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith((".gamma", ".running_var")):
            values[name] = np.ones(shape, dtype=dtype)
        else:
            raise AssertionError(f"unclassified parameter {name}")
    return Params(values)


class _Ctx:
    """One forward pass: wraps parameters as Vars exactly once."""

    def __init__(self, params: Params, mode: str):
        self.params = params
        self.mode = mode
        self.vars: dict[str, Var] = {}
        self.running: dict[str, dict] = {}

    def var(self, name: str) -> Var:
        if name not in self.vars:
            self.vars[name] = Var(self.params.values[name])
        return self.vars[name]

    def bn(self, x: Var, prefix: str) -> Var:
        run = self.running.setdefault(
            prefix,
            {
                "mean": self.params.values[f"{prefix}.running_mean"],
                "var": self.params.values[f"{prefix}.running_var"],
            },
        )
        y = ag.batchnorm(x, self.var(f"{prefix}.gamma"), self.var(f"{prefix}.beta"), run, self.mode)
        if self.mode == "train":
            self.params.values[f"{prefix}.running_mean"] = run["mean"]
            self.params.values[f"{prefix}.running_var"] = run["var"]
        return y


def _basic_block(ctx: _Ctx, x: Var, prefix: str, stride: int, project: bool) -> Var:
    out = ag.conv2d(x, ctx.var(f"{prefix}.conv1.w"), stride=stride, pad=1)
    out = ag.relu(ctx.bn(out, f"{prefix}.bn1"))
    out = ag.conv2d(out, ctx.var(f"{prefix}.conv2.w"), stride=1, pad=1)
    out = ctx.bn(out, f"{prefix}.bn2")
    if project:
        sk = ag.conv2d(x, ctx.var(f"{prefix}.proj.w"), stride=stride)
        sk = ctx.bn(sk, f"{prefix}.proj_bn")
    else:
        sk = x
    return ag.relu(ag.add(out, sk))


def _forward(cfg: NetConfig, ctx: _Ctx, x: Var):
    n, c, h, w = x.data.shape
    if c != 3:
        raise ValueError(f"expected 3 input channels, got {c}")
    if h % 16 or w % 16:
        raise ValueError(
            f"input {h}x{w} is not divisible by 16; pad or resize the image first"
        )
    c1, c2, c3 = cfg.stage_channels

    stem = ag.conv2d(x, ctx.var("stem.conv.w"), stride=2, pad=3)
    stem = ag.relu(ctx.bn(stem, "stem.bn"))
    stem = ag.maxpool2d(stem, kernel=3, stride=2, pad=1)  # /4

    def stage(name, inp, cin, cout, stride):
        out = _basic_block(ctx, inp, f"{name}.block1", stride, stride != 1 or cin != cout)
        return _basic_block(ctx, out, f"{name}.block2", 1, False)

    s1 = stage("stage1", stem, cfg.stem_channels, c1, 1)  # /4
    s2 = stage("stage2", s1, c1, c2, 2)  # /8
    s3 = stage("stage3", s2, c2, c3, 2)  # /16

    th, tw = s3.data.shape[2:]
    branches = [s3]
    for i, f in enumerate(cfg.ppm_factors):
        f_eff = min(f, th, tw)  # oversized factors clamp to global pooling
        if cfg.ppm_pool == "avg":
            pooled = ag.avgpool_factor(s3, f_eff)
        else:
            pooled = ag.maxpool_factor(s3, f_eff)
        pooled = ag.relu(ag.conv2d(pooled, ctx.var(f"ppm.branch{i}.conv.w"), ctx.var(f"ppm.branch{i}.conv.b")))
        branches.append(ag.upsample_bilinear(pooled, th, tw))
    fused = ag.concat(branches)
    fused = ag.relu(ag.conv2d(fused, ctx.var("ppm.fuse.w"), ctx.var("ppm.fuse.b")))

    d8 = ag.deconv2d(fused, ctx.var("dec1.deconv.w"), stride=2, pad=1)
    d8 = ag.relu(ctx.bn(d8, "dec1.bn"))
    d8 = ag.add(d8, ag.conv2d(s2, ctx.var("skip_stage2.w")))

    d4 = ag.deconv2d(d8, ctx.var("dec2.deconv.w"), stride=2, pad=1)
    d4 = ag.relu(ctx.bn(d4, "dec2.bn"))
    d4 = ag.add(d4, ag.conv2d(stem, ctx.var("skip_stem.w")))
    d4 = ag.add(d4, ag.conv2d(s1, ctx.var("skip_stage1.w")))

    up = ag.upsample_bilinear(d4, h, w)
    logits = ag.conv2d(up, ctx.var("head.w"), ctx.var("head.b"))
    features = {
        "stem": stem,
        "stage1": s1,
        "stage2": s2,
        "trunk": s3,
        "fused": fused,
        "decoder8": d8,
        "decoder4": d4,
    }
    return logits, features


def forward_traced(cfg: NetConfig, params: Params, x: np.ndarray, mode: str = "train"):
    """Traced forward for training; returns (logits Var, param Vars dict)."""
    ctx = _Ctx(params, mode)
    logits, _ = _forward(cfg, ctx, Var(np.asarray(x)))
    return logits, ctx.vars


def model_forward(
    cfg: NetConfig, params: Params, x: np.ndarray, mode: str = "eval", want_features: bool = False
):
    """Plain-array forward. Returns logits (N, num_classes, H, W); with
    ``want_features`` also a dict of intermediate feature maps."""
    if mode == "eval":
        with ag.no_grad():
            ctx = _Ctx(params, mode)
            logits, feats = _forward(cfg, ctx, Var(np.asarray(x)))
    else:
        ctx = _Ctx(params, mode)
        logits, feats = _forward(cfg, ctx, Var(np.asarray(x)))
    if want_features:
        return logits.data, {k: v.data for k, v in feats.items()}
    return logits.data


def collect_grads(param_vars: dict) -> dict:
    """Pull accumulated gradients out of the traced parameter Vars."""
    return {n: v.grad for n, v in param_vars.items() if v.grad is not None}

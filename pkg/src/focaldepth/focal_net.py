"""Toy focal-conditioned depth model, hand-differentiated.

The model threads a single focal-length value into depth prediction: a
learnable 12x16 encoding grid is multiplied by the focal length, resized to
the 1/32 feature scale, and chained bilinearly up through the 1/16 ... 1/2
scales; each focal plane is concatenated onto the matching backbone feature
level; the fused multi-scale features (resampled to the finest level, plus a
pseudo relative-depth channel) feed a per-pixel softmax over depth bins whose
learnable centers live strictly inside [d_min, d_max], and the prediction is
the probability-weighted sum of bin centers. Training uses a decoupled
weight-decay adaptive-moment optimizer with two learning-rate groups: the
backbone crawls at base_lr * backbone_lr_ratio while the focal encoding and
the bin head move at base_lr.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArgumentError, DimensionError, NumericalFailure
from .numerics import (
    FeatureStack,
    GradTape,
    Plane2D,
    Var,
    _bilinear_array,
    concat_channels,
    concat_vars,
    round_half_up,
)

log = logging.getLogger(__name__)

ENCODING_ROWS = 12
ENCODING_COLS = 16
NUM_LEVELS = 5


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    """Scale-invariant log loss: alpha * sqrt(mean(g^2) - lambda * mean(g)^2),
    g = log(pred) - log(gt) over masked pixels."""

    silog_lambda: float = 0.85
    silog_alpha: float = 10.0

    def __post_init__(self):
        if not 0 <= self.silog_lambda <= 1:
            raise ArgumentError(f"silog_lambda must be in [0, 1], got {self.silog_lambda}")
        if self.silog_alpha <= 0:
            raise ArgumentError(f"silog_alpha must be positive, got {self.silog_alpha}")


@dataclass(frozen=True)
class TrainerConfig:
    base_lr: float = 1.6e-4
    backbone_lr_ratio: float = 1.0 / 50.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 5
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ArgumentError(f"base_lr must be positive, got {self.base_lr}")
        # ratio 0 is the documented "freeze the backbone" degenerate mode
        if not 0 <= self.backbone_lr_ratio <= 1:
            raise ArgumentError(f"backbone_lr_ratio must be in [0, 1], got {self.backbone_lr_ratio}")
        if self.epochs < 0:
            raise ArgumentError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be at least 1")


# ---------------------------------------------------------------------------
# Focal encoding and scale pyramids
# ---------------------------------------------------------------------------

@dataclass
class FocalEncodingMatrix:
    """Learnable 12x16 grid; multiplied by the focal length to form features."""

    values: np.ndarray
    init_seed: Optional[int] = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.shape != (ENCODING_ROWS, ENCODING_COLS):
            raise DimensionError(
                f"encoding matrix must be {ENCODING_ROWS}x{ENCODING_COLS}, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericalFailure("encoding matrix has non-finite values")

    @classmethod
    def create(cls, seed: int) -> "FocalEncodingMatrix":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 0.02, (ENCODING_ROWS, ENCODING_COLS)), init_seed=seed)

    @classmethod
    def unit_init(cls, seed: int) -> "FocalEncodingMatrix":
        """Near-unit gain: the focal input reaches the head at its natural
        scale from the first step instead of crawling out of a tiny-times-tiny
        product with the head weights."""
        rng = np.random.default_rng(seed)
        return cls(1.0 + rng.normal(0.0, 0.05, (ENCODING_ROWS, ENCODING_COLS)), init_seed=seed)

    @classmethod
    def zeros(cls) -> "FocalEncodingMatrix":
        return cls(np.zeros((ENCODING_ROWS, ENCODING_COLS)))


def level_dims(height: int, width: int) -> list:
    """(h, w) of the 1/2 ... 1/32 pyramid levels, rounded, floored at 1 px."""
    return [
        (max(1, round_half_up(height / 2**j)), max(1, round_half_up(width / 2**j)))
        for j in range(1, NUM_LEVELS + 1)
    ]


class ScalePyramid:
    """Five feature stacks at 1/2 ... 1/32 of a base resolution.

    levels[0] is the finest (1/2) level. When built on a gradient tape the
    matching Vars ride along in .nodes so downstream ops can keep the tape
    connected; levels always hold concrete values.
    """

    __slots__ = ("levels", "base_resolution", "nodes")

    def __init__(self, levels, base_resolution, nodes=None):
        levels = list(levels)
        if len(levels) != NUM_LEVELS:
            raise DimensionError(f"a scale pyramid has {NUM_LEVELS} levels, got {len(levels)}")
        dims = level_dims(*base_resolution)
        for j, (stack, (h, w)) in enumerate(zip(levels, dims)):
            if (stack.height, stack.width) != (h, w):
                raise DimensionError(
                    f"level {j} is {stack.height}x{stack.width}, expected {h}x{w} "
                    f"for base {base_resolution}"
                )
        if nodes is not None and len(nodes) != NUM_LEVELS:
            raise DimensionError("pyramid nodes must match the level count")
        self.levels = levels
        self.base_resolution = (int(base_resolution[0]), int(base_resolution[1]))
        self.nodes = list(nodes) if nodes is not None else None

    @property
    def channels_per_level(self) -> list:
        return [s.channels for s in self.levels]

    def __repr__(self):
        return f"ScalePyramid(base={self.base_resolution}, channels={self.channels_per_level})"


def make_focal_pyramid(f: float, matrix, target, validate: bool = True) -> ScalePyramid:
    """Focal features at all five scales: f * matrix resized to the 1/32 level,
    then chained bilinear upsampling to 1/16 ... 1/2.

    matrix may be a FocalEncodingMatrix (pure value pyramid) or a tape Var of
    the same shape (gradient flows back into the encoding grid).
    """
    if validate and not f > 0:
        raise ArgumentError(f"focal length must be positive, got {f}")
    dims = level_dims(*target)

    if isinstance(matrix, Var):
        if matrix.value.shape != (ENCODING_ROWS, ENCODING_COLS):
            raise DimensionError(f"encoding Var must be 12x16, got {matrix.value.shape}")
        base = (matrix * float(f)).reshape((1, ENCODING_ROWS, ENCODING_COLS))
        cur = base if dims[-1] == (ENCODING_ROWS, ENCODING_COLS) else base.resample_bilinear(*dims[-1])
        nodes = [cur]
        for h, w in reversed(dims[:-1]):
            cur = cur.resample_bilinear(h, w)
            nodes.append(cur)
        nodes.reverse()
        stacks = [FeatureStack.from_array(n.value) for n in nodes]
        return ScalePyramid(stacks, target, nodes)

    base = float(f) * matrix.values
    cur = base[None] if dims[-1] == (ENCODING_ROWS, ENCODING_COLS) else _bilinear_array(base[None], *dims[-1])
    planes = [cur]
    for h, w in reversed(dims[:-1]):
        cur = _bilinear_array(cur, h, w)
        planes.append(cur)
    planes.reverse()
    stacks = [FeatureStack.from_array(p) for p in planes]
    return ScalePyramid(stacks, target)


def fuse(features: ScalePyramid, focal: ScalePyramid) -> ScalePyramid:
    """Per-level channel concatenation, feature channels first."""
    if features.base_resolution != focal.base_resolution:
        raise DimensionError(
            f"pyramids disagree on base resolution: "
            f"{features.base_resolution} vs {focal.base_resolution}"
        )
    stacks = []
    nodes = None
    if features.nodes is not None or focal.nodes is not None:
        nodes = []
    for j in range(NUM_LEVELS):
        if nodes is None:
            stacks.append(concat_channels(features.levels[j], focal.levels[j]))
        else:
            a = features.nodes[j] if features.nodes is not None else features.levels[j].as_array()
            b = focal.nodes[j] if focal.nodes is not None else focal.levels[j].as_array()
            node = concat_vars([a, b], axis=0)
            nodes.append(node)
            stacks.append(FeatureStack.from_array(node.value))
    return ScalePyramid(stacks, features.base_resolution, nodes)


# ---------------------------------------------------------------------------
# Toy backbone
# ---------------------------------------------------------------------------

def _adaptive_avg_pool(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average pooling over floor/ceil bin edges; handles non-divisible sizes."""
    c, h, w = arr.shape
    integral = np.zeros((c, h + 1, w + 1))
    integral[:, 1:, 1:] = arr.cumsum(axis=1).cumsum(axis=2)
    y0 = (np.arange(out_h) * h) // out_h
    y1 = -((-(np.arange(out_h) + 1) * h) // out_h)  # ceil
    x0 = (np.arange(out_w) * w) // out_w
    x1 = -((-(np.arange(out_w) + 1) * w) // out_w)
    sums = (
        integral[:, y1[:, None], x1[None, :]]
        - integral[:, y0[:, None], x1[None, :]]
        - integral[:, y1[:, None], x0[None, :]]
        + integral[:, y0[:, None], x0[None, :]]
    )
    areas = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return sums / areas


class ToyBackbone:
    """Deterministic stand-in feature extractor: an average-pool pyramid with
    one fixed-seed 3->C linear mix per level, plus a normalized-luminance
    pseudo relative-depth plane. The mixing weights are the trainable
    "backbone" parameter group."""

    def __init__(self, seed: int, channels_per_level: int = 4):
        self.seed = int(seed)
        self.channels_per_level = int(channels_per_level)
        rng = np.random.default_rng(seed)
        self.mix = [
            rng.normal(0.0, 1.0 / np.sqrt(3.0), (self.channels_per_level, 3))
            for _ in range(NUM_LEVELS)
        ]

    def param_arrays(self) -> dict:
        return {f"backbone.mix{j + 1}": self.mix[j] for j in range(NUM_LEVELS)}

    def forward(self, rgb01: np.ndarray, mix_vars: Optional[dict] = None):
        """rgb01: (3, H, W) in [0, 1]. Returns (relative depth, feature pyramid)."""
        if rgb01.ndim != 3 or rgb01.shape[0] != 3:
            raise DimensionError(f"backbone input must be (3,H,W), got {rgb01.shape}")
        h, w = rgb01.shape[1:]
        lum = rgb01.mean(axis=0)
        lo, hi = lum.min(), lum.max()
        rel = (lum - lo) / (hi - lo) if hi > lo else np.zeros_like(lum)

        stacks = []
        nodes = [] if mix_vars is not None else None
        for j, (lh, lw) in enumerate(level_dims(h, w)):
            pooled = _adaptive_avg_pool(rgb01, lh, lw)
            if mix_vars is None:
                mixed = np.tensordot(self.mix[j], pooled, axes=(1, 0))
                stacks.append(FeatureStack.from_array(mixed))
            else:
                wv = mix_vars[f"backbone.mix{j + 1}"]
                node = (wv.reshape((self.channels_per_level, 3, 1, 1)) * pooled).sum(axis=1)
                nodes.append(node)
                stacks.append(FeatureStack.from_array(node.value))
        return Plane2D(rel), ScalePyramid(stacks, (h, w), nodes)


def toy_backbone(rgb: FeatureStack, seed: int):
    """Frozen-weight convenience wrapper over ToyBackbone.forward."""
    if rgb.channels != 3:
        raise DimensionError(f"expected a 3-channel rgb stack, got {rgb.channels}")
    arr = rgb.as_array()
    if arr.min() < 0 or arr.max() > 1:
        raise ArgumentError("rgb stack must be normalized to [0, 1]")
    return ToyBackbone(seed).forward(arr)


# ---------------------------------------------------------------------------
# Bin head and prediction
# ---------------------------------------------------------------------------

@dataclass
class BinHead:
    """Per-pixel depth bins: linear projection to bin logits plus learnable
    bin widths mapped monotonically onto [d_min, d_max]."""

    n_bins: int
    d_min: float
    d_max: float
    proj_w: np.ndarray  # (n_bins, in_channels)
    proj_b: np.ndarray  # (n_bins,)
    bin_params: np.ndarray  # (n_bins,) unnormalized widths

    def __post_init__(self):
        if self.n_bins < 2:
            raise ArgumentError(f"need at least 2 bins, got {self.n_bins}")
        if not 0 < self.d_min < self.d_max:
            raise ArgumentError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        self.proj_w = np.array(self.proj_w, dtype=np.float64)
        self.proj_b = np.array(self.proj_b, dtype=np.float64)
        self.bin_params = np.array(self.bin_params, dtype=np.float64)
        if self.proj_w.shape[0] != self.n_bins or self.proj_w.ndim != 2:
            raise DimensionError(f"proj_w must be (n_bins, C), got {self.proj_w.shape}")
        if self.proj_b.shape != (self.n_bins,) or self.bin_params.shape != (self.n_bins,):
            raise DimensionError("proj_b and bin_params must be (n_bins,)")

    @property
    def in_channels(self) -> int:
        return self.proj_w.shape[1]

    @classmethod
    def create(cls, seed: int, in_channels: int, n_bins: int = 64,
               d_min: float = 1e-3, d_max: float = 10.0) -> "BinHead":
        rng = np.random.default_rng(seed)
        return cls(
            n_bins=n_bins,
            d_min=d_min,
            d_max=d_max,
            proj_w=rng.normal(0.0, 0.01, (n_bins, in_channels)),
            proj_b=np.zeros(n_bins),
            bin_params=np.zeros(n_bins),
        )

    def param_arrays(self) -> dict:
        return {
            "head.proj_w": self.proj_w,
            "head.proj_b": self.proj_b,
            "head.bin_params": self.bin_params,
        }

    def centers(self) -> np.ndarray:
        """Current bin centers (midpoints of normalized cumulative widths)."""
        e = np.exp(self.bin_params - self.bin_params.max())
        frac = e / e.sum()
        cum = np.cumsum(frac)
        return self.d_min + (self.d_max - self.d_min) * (cum - 0.5 * frac)


def predict_depth_node(fused: ScalePyramid, relative_depth: Plane2D,
                       head: BinHead, head_vars: dict) -> Var:
    """Tape-connected prediction; returns a Var at the pyramid's base size."""
    th, tw = fused.levels[0].height, fused.levels[0].width
    base_h, base_w = fused.base_resolution
    if relative_depth.shape != (base_h, base_w):
        raise DimensionError(
            f"relative depth {relative_depth.shape} vs base {fused.base_resolution}"
        )

    parts = []
    for j in range(NUM_LEVELS):
        src = fused.nodes[j] if fused.nodes is not None else fused.levels[j].as_array()
        if isinstance(src, Var):
            parts.append(src if src.value.shape[-2:] == (th, tw) else src.resample_bilinear(th, tw))
        else:
            parts.append(src if src.shape[-2:] == (th, tw) else _bilinear_array(src, th, tw))
    parts.append(_bilinear_array(relative_depth.data[None], th, tw))

    total = sum(p.value.shape[0] if isinstance(p, Var) else p.shape[0] for p in parts)
    if total != head.in_channels:
        raise DimensionError(
            f"head expects {head.in_channels} channels, fused features provide {total}"
        )
    if any(isinstance(p, Var) for p in parts):
        feats = concat_vars(parts, axis=0)
    else:
        feats = np.concatenate(parts, axis=0)

    w = head_vars["head.proj_w"]
    b = head_vars["head.proj_b"]
    bp = head_vars["head.bin_params"]
    nb = head.n_bins

    logits = (w.reshape((nb, head.in_channels, 1, 1)) * feats).sum(axis=1) + b.reshape((nb, 1, 1))
    prob = logits.softmax(axis=0)
    frac = bp.softmax(axis=0)
    centers = (frac.cumsum(0) + frac * (-0.5)) * (head.d_max - head.d_min) + head.d_min
    depth = (prob * centers.reshape((nb, 1, 1))).sum(axis=0)
    if (th, tw) != (base_h, base_w):
        depth = depth.resample_bilinear(base_h, base_w)
    return depth


def predict_depth(fused: ScalePyramid, relative_depth: Plane2D, head: BinHead) -> Plane2D:
    """Pure prediction: softmax over bins, probability-weighted center sum."""
    tape = fused.nodes[0].tape if fused.nodes else GradTape()
    head_vars = {name: tape.param(arr, name) for name, arr in head.param_arrays().items()}
    return Plane2D(predict_depth_node(fused, relative_depth, head, head_vars).value)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

SILOG_GRAD_FLOOR = 1e-12


def silog_loss(pred, gt: Plane2D, mask: Plane2D, cfg: Optional[LossConfig] = None):
    """Scale-invariant log loss over masked pixels.

    pred may be a Plane2D (returns (float, clamped_flag)) or a tape Var
    (returns (Var, clamped_flag) with gradients recorded on the tape). The
    clamped flag reports that the sqrt argument fell below the gradient
    floor (the lambda = 1 degeneracy), in which case the gradient is zeroed.
    """
    cfg = cfg or LossConfig()
    if isinstance(pred, Var):
        return _silog_node(pred, gt, mask, cfg)
    tape = GradTape()
    node, clamped = _silog_node(tape.param(pred.data, "pred"), gt, mask, cfg)
    return float(node.value), clamped


def _silog_node(pred: Var, gt: Plane2D, mask: Plane2D, cfg: LossConfig):
    if pred.value.shape != gt.shape or pred.value.shape != mask.shape:
        raise ArgumentError(
            f"shape mismatch: pred {pred.value.shape}, gt {gt.shape}, mask {mask.shape}"
        )
    m = mask.data
    n = int(np.count_nonzero(m == 1))
    if n == 0:
        raise ArgumentError("silog loss needs at least one masked-in pixel")
    if np.any(pred.value[m == 1] <= 0) or np.any(gt.data[m == 1] <= 0):
        raise ArgumentError("masked pixels must have positive pred and gt")

    log_gt = np.log(np.where(m == 1, gt.data, 1.0))
    pred_safe = pred * m + (1.0 - m)  # masked-out pixels become log(1) = 0
    g = (pred_safe.log() - log_gt) * m
    s1 = g.sum() * (1.0 / n)
    s2 = (g * g).sum() * (1.0 / n)
    arg = s2 - cfg.silog_lambda * (s1 * s1)
    clamped = bool(arg.value < SILOG_GRAD_FLOOR)
    loss = arg.sqrt(grad_floor=SILOG_GRAD_FLOOR) * cfg.silog_alpha
    return loss, clamped


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay; per-parameter learning
    rates implement the two-group (backbone vs head+encoding) schedule."""

    def __init__(self, params: dict, lr_map: dict, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        missing = set(params) - set(lr_map)
        if missing:
            raise ArgumentError(f"no learning rate for parameters: {sorted(missing)}")
        self.params = params
        self.lr_map = dict(lr_map)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p -= self.lr_map[name] * (m_hat / (np.sqrt(v_hat) + self.epsilon)
                                      + self.weight_decay * p)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class ToyDepthModel:
    """Backbone features + focal pyramid + bin head, end to end."""

    def __init__(self, seed: int = 0, n_bins: int = 64, d_min: float = 1e-3,
                 d_max: float = 10.0, channels_per_level: int = 4,
                 ablate_focal: bool = False, focal_normalizer: Optional[float] = None,
                 encoding_init: str = "small"):
        if encoding_init not in ("small", "unit"):
            raise ArgumentError(f"encoding_init must be 'small' or 'unit', got {encoding_init!r}")
        self.seed = int(seed)
        self.ablate_focal = bool(ablate_focal)
        self.focal_normalizer = focal_normalizer
        self.encoding_init = encoding_init
        self.backbone = ToyBackbone(seed, channels_per_level)
        if ablate_focal:
            self.matrix = FocalEncodingMatrix.zeros()
        elif encoding_init == "unit":
            self.matrix = FocalEncodingMatrix.unit_init(seed + 1)
        else:
            self.matrix = FocalEncodingMatrix.create(seed + 1)
        in_channels = NUM_LEVELS * (channels_per_level + 1) + 1
        self.head = BinHead.create(seed + 2, in_channels, n_bins, d_min, d_max)

    @property
    def channels_per_level(self) -> int:
        return self.backbone.channels_per_level

    def backbone_param_names(self) -> list:
        return sorted(self.backbone.param_arrays())

    def param_arrays(self) -> dict:
        """Trainable tensors by name; the focal encoding is omitted (frozen at
        zero) when the model is ablated."""
        out = {}
        if not self.ablate_focal:
            out["M"] = self.matrix.values
        out.update(self.head.param_arrays())
        out.update(self.backbone.param_arrays())
        return out

    def lift(self, tape: GradTape) -> dict:
        return {name: tape.param(arr, name) for name, arr in self.param_arrays().items()}

    def _focal_input(self, f: float) -> float:
        return f / self.focal_normalizer if self.focal_normalizer else f

    def forward(self, rgb01: np.ndarray, f: float, params: dict) -> Var:
        """Tape-connected forward pass; rgb01 is (3,H,W) in [0,1]."""
        h, w = rgb01.shape[1:]
        mix_vars = {k: params[k] for k in self.backbone.param_arrays()}
        rel, feats = self.backbone.forward(rgb01, mix_vars)
        if self.ablate_focal:
            focal = make_focal_pyramid(self._focal_input(f), self.matrix, (h, w))
        else:
            focal = make_focal_pyramid(self._focal_input(f), params["M"], (h, w))
        fused = fuse(feats, focal)
        return predict_depth_node(fused, rel, self.head, params)

    def predict(self, rgb01: np.ndarray, f: float) -> Plane2D:
        tape = GradTape()
        return Plane2D(self.forward(rgb01, f, self.lift(tape)).value)

    def predict_sample(self, sample) -> Plane2D:
        return self.predict(sample_rgb01(sample), sample.intrinsics.fx)

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        obj = {
            "schema_version": 1,
            "kind": "toy_depth_model",
            "config": {
                "seed": self.seed,
                "n_bins": self.head.n_bins,
                "d_min": self.head.d_min,
                "d_max": self.head.d_max,
                "channels_per_level": self.channels_per_level,
                "ablate_focal": self.ablate_focal,
                "focal_normalizer": self.focal_normalizer,
                "encoding_init": self.encoding_init,
            },
            "tensors": {
                "M": self.matrix.values.tolist(),
                **{k: v.tolist() for k, v in self.head.param_arrays().items()},
                **{k: v.tolist() for k, v in self.backbone.param_arrays().items()},
            },
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj), encoding="utf-8")
        return path

    @classmethod
    def load_checkpoint(cls, path) -> "ToyDepthModel":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("kind") != "toy_depth_model" or obj.get("schema_version") != 1:
            raise ArgumentError(f"{path}: not a version-1 model checkpoint")
        cfg = obj["config"]
        model = cls(
            seed=cfg["seed"],
            n_bins=cfg["n_bins"],
            d_min=cfg["d_min"],
            d_max=cfg["d_max"],
            channels_per_level=cfg["channels_per_level"],
            ablate_focal=cfg["ablate_focal"],
            focal_normalizer=cfg.get("focal_normalizer"),
            encoding_init=cfg.get("encoding_init", "small"),
        )
        tensors = obj["tensors"]
        model.matrix.values[...] = np.asarray(tensors["M"], dtype=np.float64)
        for name, arr in {**model.head.param_arrays(), **model.backbone.param_arrays()}.items():
            arr[...] = np.asarray(tensors[name], dtype=np.float64)
        return model


def sample_rgb01(sample) -> np.ndarray:
    """(3,H,W) float image in [0,1] from an RgbdSample."""
    return sample.rgb.astype(np.float64).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ToyDepthModel
    losses: list = field(default_factory=list)


def train(dataset, cfg: TrainerConfig, loss_cfg: Optional[LossConfig] = None,
          model: Optional[ToyDepthModel] = None, ablate_focal: bool = False) -> TrainResult:
    """Mini-batch steps over deterministic per-epoch shuffles.

    Two learning-rate groups: backbone.* at base_lr * backbone_lr_ratio,
    everything else (focal encoding, bin head) at base_lr. Each optimizer
    step applies the batch-mean gradient; the recorded loss is the batch
    mean of per-sample losses.
    """
    if not dataset:
        raise ArgumentError("training needs a non-empty dataset")
    loss_cfg = loss_cfg or LossConfig()
    if model is None:
        model = ToyDepthModel(seed=cfg.seed, ablate_focal=ablate_focal)
    params = model.param_arrays()
    lr_map = {
        name: cfg.base_lr * (cfg.backbone_lr_ratio if name.startswith("backbone.") else 1.0)
        for name in params
    }
    opt = AdamW(params, lr_map, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            batch_grads = None
            batch_loss = 0.0
            for i in batch:
                sample = dataset[i]
                tape = GradTape()
                lifted = model.lift(tape)
                pred = model.forward(sample_rgb01(sample), sample.intrinsics.fx, lifted)
                loss, _ = silog_loss(pred, sample.depth, sample.valid_mask, loss_cfg)
                if not np.isfinite(loss.value):
                    raise NumericalFailure(
                        f"non-finite loss at step {step} on sample {sample.source_id!r}"
                    )
                grads = tape.backward(loss)
                if batch_grads is None:
                    batch_grads = grads
                else:
                    for name in batch_grads:
                        batch_grads[name] += grads[name]
                batch_loss += float(loss.value)
            scale = 1.0 / len(batch)
            opt.step({name: g * scale for name, g in batch_grads.items()})
            losses.append(batch_loss * scale)
            step += 1
    return TrainResult(model=model, losses=losses)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradcheck(model: ToyDepthModel, rgb01: np.ndarray, f: float, gt: Plane2D,
              mask: Plane2D, loss_cfg: Optional[LossConfig] = None,
              fd_step: float = 1e-5) -> dict:
    """Max relative error per parameter tensor: tape gradients vs central
    finite differences (step scaled by parameter magnitude), through the
    full fuse -> predict -> loss path."""
    loss_cfg = loss_cfg or LossConfig()

    def loss_value() -> float:
        tape = GradTape()
        pred = model.forward(rgb01, f, model.lift(tape))
        loss, _ = silog_loss(pred, gt, mask, loss_cfg)
        return float(loss.value)

    tape = GradTape()
    pred = model.forward(rgb01, f, model.lift(tape))
    loss, _ = silog_loss(pred, gt, mask, loss_cfg)
    analytic = tape.backward(loss)

    report = {}
    for name, arr in model.param_arrays().items():
        flat = arr.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            h = fd_step * max(1.0, abs(orig))
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        a = analytic[name].reshape(-1)
        rel = np.abs(a - numeric) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(numeric)))
        report[name] = float(rel.max())
    return report

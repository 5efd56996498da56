"""Toy-scale networks, objectives and optimizer for both training stages.

Parameters live in plain ``dict[str, Parameter]`` maps. Encoder parameters
carry an ``encoder.`` prefix in every model, so a pretraining checkpoint can
seed a segmenter directly.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import BatchSizeError, DataError, DimensionError, LabelError, NumericError
from .ssl_loss import EmbeddingBatch

NUM_CLASSES = 3
IGNORE_LABEL = 255
CHECKPOINT_FORMAT = "barlowtuple-checkpoint"
CHECKPOINT_VERSION = 1

Params = dict[str, Parameter]


@dataclass
class EncoderConfig:
    in_channels: int = 3
    block_channels: tuple[int, ...] = (8, 16, 32, 64)

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) < 2:
            raise DimensionError("encoder needs at least 2 blocks")
        if self.block_channels[-1] < 4:
            raise DimensionError("representation dim must be >= 4")

    @property
    def rep_dim(self) -> int:
        return self.block_channels[-1]

    @property
    def downsample(self) -> int:
        return 2 ** len(self.block_channels)


@dataclass
class ProjectorConfig:
    rep_dim: int = 64
    expansion: int = 4

    @property
    def out_dim(self) -> int:
        return self.expansion * self.rep_dim


@dataclass
class SegmenterConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if isinstance(self.encoder, Mapping):
            self.encoder = EncoderConfig(**self.encoder)


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _conv_params(params: Params, name: str, rng, cin: int, cout: int, k: int) -> None:
    params[f"{name}.weight"] = Parameter(_kaiming(rng, (cout, cin, k, k), cin * k * k), f"{name}.weight")
    params[f"{name}.bias"] = Parameter(np.zeros(cout), f"{name}.bias")


def _linear_params(params: Params, name: str, rng, din: int, dout: int) -> None:
    params[f"{name}.weight"] = Parameter(_kaiming(rng, (din, dout), din), f"{name}.weight")
    params[f"{name}.bias"] = Parameter(np.zeros(dout), f"{name}.bias")


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    cin = config.in_channels
    for i, cout in enumerate(config.block_channels):
        _conv_params(params, f"encoder.block{i}", rng, cin, cout, 3)
        cin = cout
    return params


def init_projector(config: ProjectorConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    din = config.rep_dim
    for i in range(3):
        _linear_params(params, f"projector.linear{i}", rng, din, config.out_dim)
        din = config.out_dim
    return params


def init_decoder(config: SegmenterConfig, rng: np.random.Generator) -> Params:
    """Decoder levels run from the bottleneck up to full resolution.

    Level ``i`` (counting from the top) upsamples, concatenates the encoder
    activation of the same resolution when there is one, and convolves down
    to that level's encoder width. The full-resolution level has no encoder
    activation to join, so it only convolves.
    """
    chans = config.encoder.block_channels
    params: Params = {}
    cin = chans[-1]
    for level in range(len(chans) - 1, -1, -1):
        skip = chans[level - 1] if level > 0 else 0
        cout = chans[level - 1] if level > 0 else chans[0]
        _conv_params(params, f"decoder.level{level}", rng, cin + skip, cout, 3)
        cin = cout
    _conv_params(params, "head", rng, cin, config.num_classes, 1)
    return params


def init_segmenter(config: SegmenterConfig, rng: np.random.Generator,
                   encoder_params: Mapping[str, Parameter] | None = None) -> Params:
    """Encoder weights are drawn first so a given seed yields the same encoder
    here and in :func:`init_encoder`; ``encoder_params`` overrides them."""
    params = init_encoder(config.encoder, rng)
    if encoder_params is not None:
        load_into(params, encoder_params)
    params.update(init_decoder(config, rng))
    return params


def load_into(params: Params, source: Mapping[str, Parameter | np.ndarray]) -> None:
    for name, p in params.items():
        if name not in source:
            continue
        value = source[name]
        value = value.data if isinstance(value, Tensor) else np.asarray(value)
        if value.shape != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
        p.data = np.array(value, dtype=np.float64)


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def _check_spatial(x: Tensor, config: EncoderConfig) -> None:
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise DimensionError(f"expected [B, {config.in_channels}, H, W], got {x.shape}")
    f = config.downsample
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(f"spatial size {x.shape[2:]} not divisible by {f}")


def encoder_features(params: Params, x, config: EncoderConfig) -> list[Tensor]:
    x = ad._as_tensor(x)
    _check_spatial(x, config)
    feats = []
    h = x
    for i in range(len(config.block_channels)):
        h = ad.relu(ad.conv2d(h, params[f"encoder.block{i}.weight"], params[f"encoder.block{i}.bias"],
                              stride=2, pad=(1, 0)))
        feats.append(h)
    return feats


def encode(params: Params, batch, config: EncoderConfig) -> Tensor:
    """Bottleneck representation ``[B, R]`` (global average of the last block)."""
    return ad.global_avg_pool(encoder_features(params, batch, config)[-1])


def project(params: Params, reps: Tensor, config: ProjectorConfig | None = None) -> EmbeddingBatch:
    reps = ad._as_tensor(reps)
    if reps.shape[0] < 2:
        raise BatchSizeError(f"projector needs B >= 2, got {reps.shape[0]}")
    h = reps
    for i in range(3):
        h = ad.add(ad.matmul(h, params[f"projector.linear{i}.weight"]), params[f"projector.linear{i}.bias"])
        if i < 2:
            h = ad.relu(ad.batchnorm_feature(h))
    if config is not None and h.shape[1] != config.out_dim:
        raise DimensionError(f"projector output {h.shape[1]} != {config.out_dim}")
    return EmbeddingBatch(h)


def segment_forward(params: Params, batch, config: SegmenterConfig, use_skips: bool = True) -> Tensor:
    """Per-pixel class logits ``[B, classes, H, W]``.

    ``use_skips=False`` feeds zeros in place of every skip activation; it
    exists for ablation checks only.
    """
    feats = encoder_features(params, batch, config.encoder)
    h = feats[-1]
    for level in range(len(feats) - 1, -1, -1):
        h = ad.upsample_nearest(h, 2)
        if level > 0:
            skip = feats[level - 1] if use_skips else Tensor(np.zeros(feats[level - 1].shape))
            h = ad.concat_channels(h, skip)
        h = ad.relu(ad.conv2d(h, params[f"decoder.level{level}.weight"], params[f"decoder.level{level}.bias"],
                              stride=1, pad=1))
    return ad.conv2d(h, params["head.weight"], params["head.bias"])


# --------------------------------------------------------------------------
# supervised objective
# --------------------------------------------------------------------------

def ce_dice_loss(logits: Tensor, target: np.ndarray, ignore_label: int = IGNORE_LABEL,
                 smooth: float = 1e-6) -> Tensor:
    """Mean pixel cross-entropy plus mean soft-Dice loss over present classes.

    Pixels labelled ``ignore_label`` are excluded from both terms.
    """
    B, C, H, W = logits.shape
    target = np.asarray(target)
    if target.shape != (B, H, W):
        raise DimensionError(f"target shape {target.shape} != {(B, H, W)}")
    valid = target != ignore_label
    if np.any((target[valid] < 0) | (target[valid] >= C)):
        raise LabelError(f"target classes must be in [0, {C}) or {ignore_label}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise LabelError("every pixel is ignored")

    onehot = np.zeros((B, C, H, W))
    b, y, x = np.nonzero(valid)
    onehot[b, target[valid].astype(int), y, x] = 1.0
    valid4 = valid[:, None].astype(np.float64)

    ce = ad.scale(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), onehot)), -1.0 / n_valid)

    probs = ad.mul(ad.softmax(logits, axis=1), valid4)
    inter = ad.sum(ad.mul(probs, onehot), axis=(0, 2, 3))
    psum = ad.sum(probs, axis=(0, 2, 3))
    tsum = onehot.sum(axis=(0, 2, 3))
    dice = ad.div(ad.add(ad.scale(inter, 2.0), smooth), ad.add(psum, tsum + smooth))
    present = (tsum > 0).astype(np.float64)
    dice_loss = ad.scale(ad.sum(ad.mul(ad.sub(1.0, dice), present)), 1.0 / present.sum())
    return ad.add(ce, dice_loss)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In-place bias-corrected Adam update of every parameter in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class CyclicLRSchedule:
    max_lr: float
    base_lr: float | None = None
    cycle_len_steps: int = 100

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.max_lr / 10.0
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError(f"need 0 < base_lr <= max_lr, got {self.base_lr}, {self.max_lr}")
        if self.cycle_len_steps < 1:
            raise ValueError("cycle length must be >= 1 step")


def cyclic_lr(schedule: CyclicLRSchedule, step: int) -> float:
    """Triangular wave: ``base_lr`` at cycle start, ``max_lr`` at mid-cycle."""
    if step < 0:
        raise ValueError("step must be >= 0")
    phase = (step % schedule.cycle_len_steps) / schedule.cycle_len_steps
    frac = 1.0 - abs(2.0 * phase - 1.0)
    return schedule.base_lr + (schedule.max_lr - schedule.base_lr) * frac


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Mapping[str, Parameter], config: dict | None = None) -> None:
    """Write an ``.npz`` with one float64 array per parameter plus a JSON header."""
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "config": config or {}, "names": list(params)}
    arrays = {f"param/{name}": p.data for name, p in params.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(npz["header"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if header["version"] > CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header['version']}")
        params = {name: Parameter(npz[f"param/{name}"], name) for name in header["names"]}
    return params, header["config"]


def config_dict(config) -> dict:
    return asdict(config)

"""Sononet-style CNN: VGG-like conv blocks, optional 1x1 adaptation layers, global average pooling."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SSLCKPT\x00"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ModelConfig:
    """Topology descriptor.

    ``blocks`` lists ``(conv_count, width)`` pairs; a 2x2 max pool sits between
    consecutive blocks. With ``adaptation`` empty the head is global average
    pooling followed by a dense classifier. Otherwise each entry adds a 1x1
    conv (with batchnorm and ReLU), a final 1x1 conv maps to ``num_classes``
    and global average pooling yields the logits directly.
    """

    blocks: tuple[tuple[int, int], ...]
    num_classes: int
    input_shape: tuple[int, int] = (32, 32)
    adaptation: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "adaptation", tuple(int(v) for v in self.adaptation))
        if not self.blocks:
            raise ValueError("model needs at least one conv block")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        for count, width in self.blocks:
            if count < 1 or width < 1:
                raise ValueError(f"invalid block ({count}, {width})")
        factor = 2 ** self.num_pools
        h, w = self.input_shape
        if h % factor or w % factor:
            raise ValueError(f"input {h}x{w} is not divisible by 2^{self.num_pools} = {factor}")

    @property
    def num_pools(self) -> int:
        return len(self.blocks) - 1

    @property
    def num_convs(self) -> int:
        convs = sum(count for count, _ in self.blocks)
        if self.adaptation:
            convs += len(self.adaptation) + 1
        return convs

    def to_dict(self) -> dict:
        return {
            "blocks": [list(b) for b in self.blocks],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "adaptation": list(self.adaptation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            blocks=tuple(tuple(b) for b in d["blocks"]),
            num_classes=d["num_classes"],
            input_shape=tuple(d.get("input_shape", (32, 32))),
            adaptation=tuple(d.get("adaptation", ())),
        )


def sononet_full(num_classes: int = 14, input_shape=(224, 288)) -> ModelConfig:
    # 13 feature convs + 1x1 adaptation conv + 1x1 class conv = 15 convs, 4 pools
    return ModelConfig(
        blocks=((2, 32), (2, 64), (3, 128), (3, 256), (3, 256)),
        num_classes=num_classes,
        input_shape=input_shape,
        adaptation=(128,),
    )


def sononet_mini(num_classes: int = 14, input_shape=(32, 32), width: int = 8) -> ModelConfig:
    return ModelConfig(
        blocks=((2, width), (2, 2 * width), (3, 4 * width)),
        num_classes=num_classes,
        input_shape=input_shape,
    )


PRESETS = {"sononet_full": sononet_full, "sononet_mini": sononet_mini}


@dataclass
class ModelParams:
    """Named trainable tensors plus batchnorm running statistics."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.tensors.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def _layer_plan(config: ModelConfig):
    """Yield (name, in_channels, out_channels, kernel, kind) in forward order."""
    cin = 1
    for b, (count, width) in enumerate(config.blocks):
        for i in range(count):
            yield f"block{b}.conv{i}", cin, width, 3, "conv"
            cin = width
        if b < len(config.blocks) - 1:
            yield f"pool{b}", cin, cin, 0, "pool"
    if config.adaptation:
        for i, width in enumerate(config.adaptation):
            yield f"adapt{i}", cin, width, 1, "conv"
            cin = width
        yield "classifier", cin, config.num_classes, 1, "conv_out"
    else:
        yield "classifier", cin, config.num_classes, 0, "dense"


def build(config: ModelConfig, seed: int) -> ModelParams:
    """He-uniform (fan-in) initialisation; batchnorm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    dtype = T.DEFAULT_DTYPE

    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    for name, cin, cout, k, kind in _layer_plan(config):
        if kind in ("conv", "conv_out"):
            tensors[f"{name}.kernel"] = Tensor(he((cout, cin, k, k), cin * k * k), requires_grad=True)
            tensors[f"{name}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
            if kind == "conv":
                tensors[f"{name}.bn_scale"] = Tensor(np.ones(cout, dtype), requires_grad=True)
                tensors[f"{name}.bn_shift"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
                buffers[f"{name}.bn_mean"] = np.zeros(cout, dtype)
                buffers[f"{name}.bn_var"] = np.ones(cout, dtype)
        elif kind == "dense":
            tensors[f"{name}.weight"] = Tensor(he((cin, cout), cin), requires_grad=True)
            tensors[f"{name}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
    for name, t in tensors.items():
        t.name = name
    return ModelParams(config, tensors, buffers)


def forward(params: ModelParams, batch, mode: str = "train", update_stats: bool = True,
            bn_momentum: float = BN_MOMENTUM) -> Tensor:
    """Logits of shape (N, num_classes) for an (N, 1, H, W) batch.

    ``update_stats=False`` normalises with batch statistics in train mode but
    leaves the running BN buffers untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    config = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (1, *config.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch shape {x.shape} does not match (N, {', '.join(map(str, expected))})")
    training = mode == "train"
    p, buf = params.tensors, params.buffers
    # single input channel: NCHW -> NHWC is a pure reshape
    x = T.reshape(x, (x.shape[0], *config.input_shape, 1))
    for name, _, _, _, kind in _layer_plan(config):
        if kind == "pool":
            x = T.maxpool2(x, layout="NHWC")
        elif kind == "conv":
            x = T.conv2d(x, p[f"{name}.kernel"], p[f"{name}.bias"], padding="same", layout="NHWC")
            x = T.batchnorm2d(x, p[f"{name}.bn_scale"], p[f"{name}.bn_shift"],
                              buf[f"{name}.bn_mean"], buf[f"{name}.bn_var"],
                              training=training, momentum=bn_momentum, layout="NHWC",
                              update_stats=update_stats)
            x = T.relu(x)
        elif kind == "conv_out":
            x = T.conv2d(x, p[f"{name}.kernel"], p[f"{name}.bias"], padding="same", layout="NHWC")
            x = T.global_avg_pool(x, layout="NHWC")
        else:
            x = T.global_avg_pool(x, layout="NHWC")
            x = T.dense(x, p[f"{name}.weight"], p[f"{name}.bias"])
    if not np.isfinite(x.data).all():
        raise FloatingPointError("non-finite logits")
    return x


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for an (N, H, W) or (N, 1, H, W) image array."""
    if images.ndim == 3:
        images = images[:, None]
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size].astype(T.DEFAULT_DTYPE, copy=False)
            out.append(forward(params, chunk, mode="eval").data)
    if not out:
        return np.zeros((0, params.config.num_classes), dtype=T.DEFAULT_DTYPE)
    return np.concatenate(out)


def recalibrate_bn(params: ModelParams, images: np.ndarray, batch_size: int = 64) -> ModelParams:
    """Copy of ``params`` whose BN buffers are population statistics of ``images``.

    Running averages collected on augmented batches drift away from the
    statistics of clean inputs; evaluation uses these recomputed ones instead.
    Batch means and variances are averaged, weighted by batch size, over the
    images in their given order.
    """
    if images.ndim == 3:
        images = images[:, None]
    out = params.copy()
    if len(images) == 0:
        return out
    total = {k: np.zeros_like(v, dtype=np.float64) for k, v in out.buffers.items()}
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size].astype(T.DEFAULT_DTYPE, copy=False)
            # momentum 0 leaves exactly this batch's statistics in the buffers
            forward(out, chunk, mode="train", bn_momentum=0.0)
            for k, v in out.buffers.items():
                total[k] += len(chunk) * v
    for k, v in out.buffers.items():
        v[...] = total[k] / len(images)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic(8) version(u32) count(u32)
#   per entry: name_len(u16) name(utf-8) ndim(u8) dims(u32 * ndim) float32 LE payload
# everything little-endian
# ---------------------------------------------------------------------------
def save_checkpoint(params: ModelParams, path) -> None:
    state = params.state()
    header = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state)),
              struct.pack("<I", len(header)), header]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f4")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    config = ModelConfig.from_dict(json.loads(raw[pos:pos + hlen]))
    pos += hlen
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    template = build(config, seed=0)
    if set(arrays) != set(template.tensors) | set(template.buffers):
        raise ValueError(f"{path}: parameter names do not match the stored topology")
    for name, t in template.tensors.items():
        t.data = arrays[name]
    for name in template.buffers:
        template.buffers[name] = arrays[name]
    return template

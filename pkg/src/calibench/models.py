"""The four networks of the pseudo-trilateral structure.

G is a stack of 3x3 convolutions producing a feature map ``f`` at input
resolution. C1 and C2 are per-pixel linear heads (1x1 convolutions) on ``f``.
D reads the same ``f`` through strided 4x4 convolutions and squashes the mean
patch logit with a sigmoid, giving one domain score per image.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkit import calt, ops
from .numkit.optim import OptimizerState, adam, sgd
from .numkit.rng import generator
from .numkit.tensor import ConfigError, ShapeError, Tensor, parameter

HEADS = ("C1", "C2")
NETWORKS = ("G", "C1", "C2", "D")


@dataclass
class ArchitectureConfig:
    num_classes: int = 4
    in_channels: int = 3
    feature_channels: int = 16
    extractor_depth: int = 3
    disc_channels: tuple[int, ...] = (16, 32, 1)
    slope: float = 0.2

    def validate(self) -> None:
        sizes = [self.num_classes, self.in_channels, self.feature_channels, self.extractor_depth,
                 *self.disc_channels]
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if any(int(s) <= 0 for s in sizes) or not self.disc_channels:
            raise ConfigError(f"all architecture sizes must be positive: {asdict(self)}")
        if self.disc_channels[-1] != 1:
            raise ConfigError("discriminator must end in a single channel")
        if not 0 <= self.slope < 1:
            raise ConfigError("leaky slope must be in [0, 1)")


def _uniform(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class ModelBundle:
    config: ArchitectureConfig
    seed: int
    params: dict[str, list[Tensor]]
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)

    def parameters(self, *nets: str) -> list[Tensor]:
        out = []
        for n in nets or NETWORKS:
            out.extend(self.params[n])
        return out

    def optimizer(self, net: str, role: str = "seg") -> OptimizerState:
        """Optimizer state for ``net`` under one objective.

        Each objective keeps its own moment buffers so that, for example, the
        adversarial gradients of G never leak into its supervised momentum.
        """
        key = net if role == "seg" else f"{net}:{role}"
        if key not in self.optimizers:
            base = self.optimizers[net]
            self.optimizers[key] = OptimizerState(base.kind, base.base_lr, base.weight_decay,
                                                  base.momentum, base.betas, base.eps)
        return self.optimizers[key]

    def snapshot(self, *nets: str) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters(*nets)]

    def copy_head(self, src: str = "C1", dst: str = "C2") -> None:
        for a, b in zip(self.params[src], self.params[dst]):
            b.data = a.data.copy()


def build(config: ArchitectureConfig | None = None, seed: int = 0,
          lr_g: float = 2.5e-4, lr_d: float = 1e-4, weight_decay: float = 5e-4) -> ModelBundle:
    """Deterministically initialise all four networks from ``seed``.

    Each network draws from its own derived stream, so C1 and C2 share an
    architecture but never their initial weights.
    """
    config = config or ArchitectureConfig()
    config.validate()
    K, Cf = config.num_classes, config.feature_channels
    params: dict[str, list[Tensor]] = {}

    rng = generator(seed, "G")
    g, c = [], config.in_channels
    for i in range(config.extractor_depth):
        g.append(parameter(_uniform(rng, (Cf, c, 3, 3), c * 9, Cf * 9), f"G.conv{i}.w"))
        g.append(parameter(np.zeros(Cf), f"G.conv{i}.b"))
        c = Cf
    params["G"] = g

    for head in HEADS:
        rng = generator(seed, head)
        params[head] = [parameter(_uniform(rng, (K, Cf), Cf, K), f"{head}.w"),
                        parameter(np.zeros(K), f"{head}.b")]

    rng = generator(seed, "D")
    d, c = [], Cf
    for i, o in enumerate(config.disc_channels):
        d.append(parameter(_uniform(rng, (o, c, 4, 4), c * 16, o * 16), f"D.conv{i}.w"))
        d.append(parameter(np.zeros(o), f"D.conv{i}.b"))
        c = o
    params["D"] = d

    optimizers = {n: sgd(lr_g, momentum=0.9, weight_decay=weight_decay) for n in ("G", *HEADS)}
    optimizers["D"] = adam(lr_d, betas=(0.9, 0.99))
    return ModelBundle(config, seed, params, optimizers)


def extract(bundle: ModelBundle, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 3 or x.shape[0] != bundle.config.in_channels:
        raise ShapeError(f"expected {bundle.config.in_channels} x H x W input, got {x.shape}")
    h = x
    g = bundle.params["G"]
    for i in range(0, len(g), 2):
        h = ops.leaky_relu(ops.conv2d(h, g[i], g[i + 1], stride=1), bundle.config.slope)
    return h


def classify(bundle: ModelBundle, head: str, f: Tensor) -> Tensor:
    w, b = bundle.params[head]
    Cf, H, W = f.shape
    flat = ops.reshape(f, (Cf, H * W))
    logits = ops.add(ops.matmul(w, flat), ops.reshape(b, (-1, 1)))
    return ops.reshape(ops.softmax_channelwise(logits), (bundle.config.num_classes, H, W))


def discriminate(bundle: ModelBundle, f: Tensor) -> Tensor:
    """Scalar domain score in (0, 1); 1 means source."""
    d = bundle.params["D"]
    h = f
    n = len(d) // 2
    for i in range(n):
        h = ops.conv2d(h, d[2 * i], d[2 * i + 1], stride=2)
        if i < n - 1:
            h = ops.leaky_relu(h, bundle.config.slope)
    return ops.sigmoid(ops.mean(h))


def forward_seg(bundle: ModelBundle, x) -> tuple[Tensor, Tensor, Tensor]:
    f = extract(bundle, x)
    return classify(bundle, "C1", f), classify(bundle, "C2", f), f


def forward_domain(bundle: ModelBundle, x) -> float:
    return discriminate(bundle, extract(bundle, x)).item()


def weight_vector(bundle: ModelBundle, head: str) -> Tensor:
    if head not in HEADS:
        raise ValueError(f"weight_vector expects one of {HEADS}, got {head!r}")
    return ops.concat(bundle.params[head])


def predict_labels(p) -> np.ndarray:
    """Per-pixel argmax; ``np.argmax`` already picks the lowest id on ties."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return np.argmax(data, axis=0)


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"CALK"


def save_checkpoint(bundle: ModelBundle, path, iteration: int = 0) -> None:
    """Write ``CALK``, u32 header length, JSON header, then CALT tensors in canonical order."""
    cfg = asdict(bundle.config)
    cfg["disc_channels"] = list(cfg["disc_channels"])
    header = json.dumps({"config": cfg, "seed": bundle.seed, "iteration": iteration,
                         "names": [p.name for p in bundle.parameters()]}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        for p in bundle.parameters():
            fh.write(calt.encode(p.data))


def load_checkpoint(path) -> tuple[ModelBundle, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC or len(raw) < 8:
        raise calt.FormatError("bad checkpoint magic", 0)
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + n])
    except ValueError as exc:
        raise calt.FormatError(f"unreadable checkpoint header: {exc}", 8) from None
    cfg = header["config"]
    cfg["disc_channels"] = tuple(cfg["disc_channels"])
    bundle = build(ArchitectureConfig(**cfg), header["seed"])
    buf = io.BytesIO(raw[8 + n:])
    for p in bundle.parameters():
        arr = calt.read_from(buf, base=8 + n)
        if arr.shape != p.shape:
            raise calt.FormatError(f"{p.name}: shape {arr.shape} != {p.shape}", 8 + n + buf.tell())
        p.data = arr.copy()
    return bundle, header["iteration"]

"""Generator / discriminator networks for feature-domain mapping.

Generator: 3x3 conv (no norm) -> two stride-2 3x3 convs with instance norm
-> residual blocks at 1/4 resolution -> two stride-2 transposed convs ->
3x3 conv to one channel, plus a shortcut from the input.  Discriminator:
five 4x4 convs (strides 2,2,2,1,1) with leaky ReLU between them and a raw
patch-score output.

Tensors are laid out [batch, channel, mel, frame].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import load_tensors, save_tensors

__all__ = [
    "GeneratorSpec",
    "ResBlockSpec",
    "DiscriminatorSpec",
    "Generator",
    "Discriminator",
    "Checkpoint",
    "InputTooSmallError",
    "build_generator",
    "build_discriminator",
    "generator_forward",
    "resblock_forward",
    "discriminator_forward",
    "same_padding",
    "output_padding_for",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_STD = 0.02
IN_EPS = 1e-5


class InputTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 32
    n_resblocks: int = 9
    zero_init_last: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.n_resblocks < 0:
            raise ValueError("n_resblocks must be >= 0")

    @property
    def channels(self) -> tuple:
        b = self.base_channels
        return (b, 2 * b, 4 * b)


@dataclass(frozen=True)
class ResBlockSpec:
    channels: int = 128
    kernel: int = 3


@dataclass(frozen=True)
class DiscriminatorSpec:
    channels: tuple = (64, 128, 256, 512, 1)
    strides: tuple = (2, 2, 2, 1, 1)
    kernel: int = 4
    slope: float = 0.2

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")
        if self.channels[-1] != 1:
            raise ValueError("the last discriminator layer must have one channel")

    @classmethod
    def scaled(cls, base: int) -> "DiscriminatorSpec":
        return cls(channels=(base, 2 * base, 4 * base, 8 * base, 1))


class _Net:
    def __init__(self, spec, params: dict):
        self.spec = spec
        self.params = params

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> list:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


class Generator(_Net):
    def __call__(self, x, trace=None):
        return generator_forward(self, x, trace=trace)


class Discriminator(_Net):
    def __call__(self, x):
        return discriminator_forward(self, x)


def _normal(rng, shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def build_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> Generator:
    rng = np.random.default_rng(seed)
    c1, c2, c3 = spec.channels
    p = {}

    def conv(name, cin, cout, transpose=False):
        shape = (cin, cout, 3, 3) if transpose else (cout, cin, 3, 3)
        p[f"{name}.w"] = _normal(rng, shape)
        p[f"{name}.b"] = _zeros(cout)

    def norm(name, c):
        p[f"{name}.g"] = _ones(c)
        p[f"{name}.b"] = _zeros(c)

    conv("down1", 1, c1)
    conv("down2", c1, c2)
    norm("down2_in", c2)
    conv("down3", c2, c3)
    norm("down3_in", c3)
    for i in range(spec.n_resblocks):
        conv(f"res{i}.conv1", c3, c3)
        norm(f"res{i}.in1", c3)
        conv(f"res{i}.conv2", c3, c3)
        norm(f"res{i}.in2", c3)
    conv("up1", c3, c2, transpose=True)
    norm("up1_in", c2)
    conv("up2", c2, c1, transpose=True)
    norm("up2_in", c1)
    if spec.zero_init_last:
        p["out.w"] = _zeros((1, c1, 3, 3))
        p["out.b"] = _zeros(1)
    else:
        conv("out", c1, 1)
    return Generator(spec, p)


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0) -> Discriminator:
    rng = np.random.default_rng(seed)
    p = {}
    cin = 1
    for i, cout in enumerate(spec.channels):
        p[f"conv{i}.w"] = _normal(rng, (cout, cin, spec.kernel, spec.kernel))
        p[f"conv{i}.b"] = _zeros(cout)
        cin = cout
    return Discriminator(spec, p)


def same_padding(n: int, k: int, stride: int) -> tuple:
    """(lo, hi) zero padding giving ceil(n / stride) outputs."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def output_padding_for(target: int, n: int, k: int = 3, stride: int = 2, padding: int = 1) -> int:
    """Output padding that makes a transposed conv of ``n`` produce ``target``."""
    op = target - ad.conv_transpose_output_size(n, k, stride, padding, 0)
    if not 0 <= op < stride:
        raise ValueError(f"cannot restore size {target} from {n} with stride {stride}")
    return op


def resblock_forward(g: Generator, i: int, x: Tensor) -> Tensor:
    p = g.params
    h = ad.conv2d(x, p[f"res{i}.conv1.w"], p[f"res{i}.conv1.b"], 1, 1)
    h = ad.relu(ad.instance_norm(h, p[f"res{i}.in1.g"], p[f"res{i}.in1.b"], IN_EPS))
    h = ad.conv2d(h, p[f"res{i}.conv2.w"], p[f"res{i}.conv2.b"], 1, 1)
    h = ad.instance_norm(h, p[f"res{i}.in2.g"], p[f"res{i}.in2.b"], IN_EPS)
    return ad.add(h, x)


def generator_forward(g: Generator, x, trace: dict | None = None) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ad.ShapeError(f"generator expects [B,1,H,W], got {x.shape}")
    h0, w0 = x.shape[2], x.shape[3]
    if h0 < 8 or w0 < 8:
        raise InputTooSmallError(f"generator input {h0}x{w0} is smaller than 8x8")
    p = g.params

    h = ad.relu(ad.conv2d(x, p["down1.w"], p["down1.b"], 1, 1))
    h = ad.conv2d(h, p["down2.w"], p["down2.b"], 2, 1)
    h1, w1 = h.shape[2], h.shape[3]
    h = ad.relu(ad.instance_norm(h, p["down2_in.g"], p["down2_in.b"], IN_EPS))
    h = ad.conv2d(h, p["down3.w"], p["down3.b"], 2, 1)
    h = ad.relu(ad.instance_norm(h, p["down3_in.g"], p["down3_in.b"], IN_EPS))
    for i in range(g.spec.n_resblocks):
        h = ad.relu(resblock_forward(g, i, h))
    if trace is not None:
        trace["bottleneck"] = h.shape
    h2, w2 = h.shape[2], h.shape[3]

    op = (output_padding_for(h1, h2), output_padding_for(w1, w2))
    h = ad.conv_transpose2d(h, p["up1.w"], p["up1.b"], 2, 1, op)
    h = ad.relu(ad.instance_norm(h, p["up1_in.g"], p["up1_in.b"], IN_EPS))
    op = (output_padding_for(h0, h1), output_padding_for(w0, w1))
    h = ad.conv_transpose2d(h, p["up2.w"], p["up2.b"], 2, 1, op)
    h = ad.relu(ad.instance_norm(h, p["up2_in.g"], p["up2_in.b"], IN_EPS))
    h = ad.conv2d(h, p["out.w"], p["out.b"], 1, 1)
    return ad.add(h, x)


def discriminator_forward(d: Discriminator, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ad.ShapeError(f"discriminator expects [B,1,H,W], got {x.shape}")
    if x.shape[2] < 16 or x.shape[3] < 16:
        raise InputTooSmallError(f"discriminator input {x.shape[2]}x{x.shape[3]} is smaller than 16x16")
    spec, p = d.spec, d.params
    h = x
    last = len(spec.channels) - 1
    for i, s in enumerate(spec.strides):
        pads = same_padding(h.shape[2], spec.kernel, s) + same_padding(h.shape[3], spec.kernel, s)
        h = ad.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], s, pads)
        if i < last:
            h = ad.leaky_relu(h, spec.slope)
    return h


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Full training state: all four networks, optimizer moments, progress."""

    params: dict = field(default_factory=dict)  # "G_st/down1.w" -> ndarray
    optim: dict = field(default_factory=dict)  # "G/m/G_st/down1.w" -> ndarray
    epoch: int = 0
    steps: dict = field(default_factory=dict)  # optimizer name -> step count
    rng_state: np.ndarray | None = None  # uint64 words, see training.pack_rng
    specs: dict = field(default_factory=dict)  # "G.base_channels" -> int

    def to_tensors(self) -> dict:
        out = {}
        for k, v in self.specs.items():
            out[f"spec/{k}"] = np.array([v], dtype=np.uint64)
        out["state/epoch"] = np.array([self.epoch], dtype=np.uint64)
        for k, v in self.steps.items():
            out[f"state/steps/{k}"] = np.array([v], dtype=np.uint64)
        if self.rng_state is not None:
            out["state/rng"] = np.asarray(self.rng_state, dtype=np.uint64)
        for k, v in self.params.items():
            out[f"param/{k}"] = v
        for k, v in self.optim.items():
            out[f"optim/{k}"] = v
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "Checkpoint":
        ck = cls()
        for name, arr in tensors.items():
            kind, _, key = name.partition("/")
            if kind == "spec":
                ck.specs[key] = int(arr[0])
            elif kind == "state":
                if key == "epoch":
                    ck.epoch = int(arr[0])
                elif key == "rng":
                    ck.rng_state = arr.copy()
                elif key.startswith("steps/"):
                    ck.steps[key[len("steps/"):]] = int(arr[0])
            elif kind == "param":
                ck.params[key] = arr
            elif kind == "optim":
                ck.optim[key] = arr
        return ck


def save_checkpoint(path, state: Checkpoint) -> None:
    save_tensors(path, state.to_tensors())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_tensors(load_tensors(path))


def generator_from_checkpoint(ck: Checkpoint, prefix: str = "G_ts") -> Generator:
    spec = GeneratorSpec(
        base_channels=ck.specs.get("G.base_channels", 32),
        n_resblocks=ck.specs.get("G.n_resblocks", 9),
    )
    g = build_generator(spec, seed=0)
    g.load_state_dict({k[len(prefix) + 1 :]: v for k, v in ck.params.items() if k.startswith(prefix + "/")})
    return g


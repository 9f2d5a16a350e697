"""U-Net and per-pixel FCNN builders, input assembly and label prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nncore as nn
from .core import N_CLASSES, LabelMap, PasegError, Sample
from .nncore import Parameter, Tensor

INPUT_MODES = ("PA", "US", "PAUS")
ARCHITECTURES = ("unet", "fcnn")


class UnsupportedCombinationError(PasegError, ValueError):
    pass


def check_combination(architecture: str, input_mode: str) -> None:
    if architecture not in ARCHITECTURES:
        raise UnsupportedCombinationError(f"unknown architecture {architecture!r}")
    if input_mode not in INPUT_MODES:
        raise UnsupportedCombinationError(f"unknown input mode {input_mode!r}")
    if architecture == "fcnn" and input_mode == "US":
        raise UnsupportedCombinationError("the FCNN cannot be trained on single-channel US input")


def input_channels(input_mode: str, n_wavelengths: int = 26) -> int:
    return {"PA": n_wavelengths, "US": 1, "PAUS": n_wavelengths + 1}[input_mode]


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int
    out_channels: int = N_CLASSES
    base_channels: int = 16
    depth: int = 4
    dropout: float = 0.25
    leak: float = 0.01

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1:
            raise ValueError("in_channels, base_channels and depth must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class FcnnSpec:
    n_in: int
    hidden_layers: int = 4
    n_out: int = N_CLASSES
    dropout: float = 0.2
    leak: float = 0.01

    def __post_init__(self):
        if self.n_in <= 0:
            raise ValueError(f"n_in must be positive, got {self.n_in}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def hidden_width(self) -> int:
        return 2 * self.n_in


class Conv3x3:
    def __init__(self, name, c_in, c_out, rng, dtype=np.float32):
        fan_in, fan_out = c_in * 9, c_out * 9
        self.w = Parameter(nn.glorot_uniform((c_out, c_in, 3, 3), fan_in, fan_out, rng, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(c_out, dtype=dtype), f"{name}.b")

    def __call__(self, x):
        return nn.conv2d(x, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


class UpConv2x2:
    def __init__(self, name, c_in, c_out, rng, dtype=np.float32):
        fan_in, fan_out = c_in * 4, c_out * 4
        self.w = Parameter(nn.glorot_uniform((c_in, c_out, 2, 2), fan_in, fan_out, rng, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(c_out, dtype=dtype), f"{name}.b")

    def __call__(self, x):
        return nn.conv_transpose2(x, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


class Dense:
    def __init__(self, name, n_in, n_out, rng, dtype=np.float32):
        self.w = Parameter(nn.glorot_uniform((n_out, n_in), n_in, n_out, rng, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(n_out, dtype=dtype), f"{name}.b")

    def __call__(self, x):
        return nn.linear(x, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


class Model:
    """Shared parameter handling for both architectures."""

    architecture = ""
    layers: list

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape}, expected {p.shape}")
            p.data = np.array(state[p.name], dtype=p.dtype)


class UNet(Model):
    architecture = "unet"

    def __init__(self, spec: UNetSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        widths = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        self.down = []
        c_prev = spec.in_channels
        for i in range(spec.depth):
            self.down.append((Conv3x3(f"down{i}.conv1", c_prev, widths[i], rng, dtype),
                              Conv3x3(f"down{i}.conv2", widths[i], widths[i], rng, dtype)))
            c_prev = widths[i]
        d = spec.depth
        self.bottom = (Conv3x3("bottom.conv1", widths[d - 1], widths[d], rng, dtype),
                       Conv3x3("bottom.conv2", widths[d], widths[d], rng, dtype))
        self.up = []
        for i in reversed(range(d)):
            self.up.append((UpConv2x2(f"up{i}.upconv", widths[i + 1], widths[i], rng, dtype),
                            Conv3x3(f"up{i}.conv1", 2 * widths[i], widths[i], rng, dtype),
                            Conv3x3(f"up{i}.conv2", widths[i], widths[i], rng, dtype)))
        self.head = Conv3x3("head", widths[0], spec.out_channels, rng, dtype)
        self.layers = [l for pair in self.down for l in pair] + list(self.bottom)
        self.layers += [l for trio in self.up for l in trio] + [self.head]

    def _act(self, x, training, rng):
        return nn.dropout(nn.leaky_relu(x, self.spec.leak), self.spec.dropout, training, rng)

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        step = 2 ** self.spec.depth
        if x.shape[1] != self.spec.in_channels:
            raise nn.ShapeError(f"U-Net expects {self.spec.in_channels} channels, got {x.shape[1]}")
        if x.shape[2] % step or x.shape[3] % step:
            raise nn.ShapeError(f"U-Net input {x.shape[2]}x{x.shape[3]} is not divisible by {step}")
        skips = []
        for conv1, conv2 in self.down:
            x = self._act(conv1(x), training, rng)
            x = self._act(conv2(x), training, rng)
            skips.append(x)
            x = nn.max_pool2(x)
        x = self._act(self.bottom[0](x), training, rng)
        x = self._act(self.bottom[1](x), training, rng)
        for (upconv, conv1, conv2), skip in zip(self.up, reversed(skips)):
            x = nn.concat_channels(upconv(x), skip)
            x = self._act(conv1(x), training, rng)
            x = self._act(conv2(x), training, rng)
        return self.head(x)

    __call__ = forward


class FCNN(Model):
    architecture = "fcnn"

    def __init__(self, spec: FcnnSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        h = spec.hidden_width
        sizes = [spec.n_in] + [h] * spec.hidden_layers + [spec.n_out]
        self.layers = [Dense(f"fc{i}", sizes[i], sizes[i + 1], rng, dtype) for i in range(len(sizes) - 1)]

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.n_in:
            raise nn.ShapeError(f"FCNN expects (B, {self.spec.n_in}), got {x.shape}")
        for layer in self.layers[:-1]:
            x = nn.dropout(nn.leaky_relu(layer(x), self.spec.leak), self.spec.dropout, training, rng)
        return self.layers[-1](x)

    __call__ = forward


def build_unet(spec: UNetSpec, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(spec, np.random.default_rng(seed), dtype)


def build_fcnn(spec: FcnnSpec, seed: int = 0, dtype=np.float32) -> FCNN:
    return FCNN(spec, np.random.default_rng(seed), dtype)


def fcnn_parameter_count(n_in: int, hidden_layers: int = 4, n_out: int = N_CLASSES) -> int:
    h = 2 * n_in
    return n_in * h + h + (hidden_layers - 1) * (h * h + h) + h * n_out + n_out


def model_header(model: Model, input_mode: str) -> dict:
    header = {"architecture": model.architecture, "input_mode": input_mode}
    header.update({f"spec.{k}": v for k, v in asdict(model.spec).items()})
    return header


def model_from_header(header: dict) -> Model:
    fields = {k[5:]: v for k, v in header.items() if k.startswith("spec.")}
    if header["architecture"] == "unet":
        cast = {"dropout": float, "leak": float}
        spec = UNetSpec(**{k: cast.get(k, int)(v) for k, v in fields.items()})
        return build_unet(spec)
    cast = {"dropout": float, "leak": float}
    spec = FcnnSpec(**{k: cast.get(k, int)(v) for k, v in fields.items()})
    return build_fcnn(spec)


def save_model(path, model: Model, input_mode: str, **extra) -> None:
    header = model_header(model, input_mode)
    header.update(extra)
    nn.save_checkpoint(path, model.parameters(), header)


def load_model(path) -> tuple[Model, dict]:
    header, arrays = nn.load_checkpoint(path)
    model = model_from_header(header)
    model.load_state_dict(arrays)
    return model, header


def minmax(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi == lo:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def assemble_input(pa: np.ndarray | None, us: np.ndarray | None, input_mode: str) -> np.ndarray:
    """Channel stack (C, H, W): PA as stored, US min-max scaled and appended last for PAUS."""
    if input_mode == "PA":
        return np.asarray(pa, dtype=np.float32)
    if input_mode == "US":
        return minmax(us)[None]
    if input_mode == "PAUS":
        return np.concatenate([np.asarray(pa, dtype=np.float32), minmax(us)[None]], axis=0)
    raise UnsupportedCombinationError(f"unknown input mode {input_mode!r}")


def sample_input(sample: Sample, input_mode: str) -> np.ndarray:
    return assemble_input(sample.pa.values, sample.us.values, input_mode)


def predict_logits(model: Model, image: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Class scores (7, H, W) for one assembled input stack, in inference mode."""
    c, h, w = image.shape
    dtype = model.parameters()[0].dtype
    if isinstance(model, UNet):
        return model(Tensor(image[None].astype(dtype))).data[0]
    pixels = image.reshape(c, -1).T.astype(dtype)
    out = np.concatenate([model(Tensor(pixels[i:i + chunk])).data for i in range(0, len(pixels), chunk)])
    return out.T.reshape(-1, h, w)


def predict_labels(model: Model, sample: Sample, input_mode: str) -> LabelMap:
    check_combination(model.architecture, input_mode)
    n_in = model.spec.in_channels if isinstance(model, UNet) else model.spec.n_in
    expected = input_channels(input_mode, sample.pa.axis.count)
    if n_in != expected:
        raise UnsupportedCombinationError(
            f"{input_mode} input has {expected} channels but the model expects {n_in}"
        )
    logits = predict_logits(model, sample_input(sample, input_mode))
    # argmax returns the first maximum, i.e. the lowest class code on ties
    return LabelMap(logits.argmax(axis=0).astype(np.uint8))

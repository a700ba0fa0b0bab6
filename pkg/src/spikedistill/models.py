"""Mini teacher CNNs and student SNNs with tapped intermediate feature maps.

Architectures are written as comma-separated layer tokens::

    conv16,relu,pool+,conv32,relu,pool+,conv64,relu,pool+

``conv<C>`` is a 3x3 same-padding conv, ``fc<W>`` an affine layer, ``pool``/``maxpool``
a 2x2 pool, ``relu``/``lif`` activations and ``flatten`` an explicit reshape.
A trailing ``+`` marks the layer output as part of the feature pattern. The
builders append the single readout head (flatten + affine to N classes).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .neuron import LIF, LifParams
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

DEFAULT_TEACHER = "conv16,relu,pool+,conv32,relu,pool+,conv64,relu,pool+"
DEFAULT_STUDENT = "conv8,lif,pool+,conv16,lif,pool+"

_TOKEN = re.compile(r"^(conv|fc|pool|maxpool|relu|lif|flatten)(\d*)(\+?)$")


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0
    tap: bool = False

    def token(self) -> str:
        size = str(self.size) if self.kind in ("conv", "fc") or (self.kind.endswith("pool") and self.size != 2) else ""
        return f"{self.kind}{size}{'+' if self.tap else ''}"


def parse_arch(text: str) -> list[LayerSpec]:
    specs = []
    for raw in text.split(","):
        tok = raw.strip()
        if not tok:
            continue
        m = _TOKEN.match(tok)
        if not m:
            raise BuildError(f"unrecognised layer token {tok!r}")
        kind, num, tap = m.groups()
        if kind in ("conv", "fc") and not num:
            raise BuildError(f"layer {tok!r} needs a width")
        if kind in ("relu", "lif", "flatten") and num:
            raise BuildError(f"layer {tok!r} takes no size")
        size = int(num) if num else (2 if kind.endswith("pool") else 0)
        specs.append(LayerSpec(kind, size, bool(tap)))
    if not any(s.tap for s in specs):
        raise BuildError(f"architecture {text!r} has no tapped layer")
    return specs


@dataclass
class FeaturePattern:
    """Tapped maps in depth order; ``t`` is the time step for student patterns."""

    entries: list[tuple[int, Tensor]] = field(default_factory=list)
    t: int | None = None

    @property
    def maps(self) -> list[Tensor]:
        return [m for _, m in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Tensor:
        return self.entries[i][1]


@dataclass
class StudentOutput:
    patterns: list[FeaturePattern]
    logits: Tensor  # time-averaged readout, b x N
    step_logits: list[Tensor]
    spikes: dict[int, list[Tensor]]  # layer index -> spike tensor per time step


class _Pool(Module):
    def __init__(self, k: int, mode: str):
        self.k, self.mode = k, mode

    def forward(self, x):
        return tn.avg_pool2d(x, self.k) if self.mode == "avg" else tn.max_pool2d(x, self.k)


class _Fn(Module):
    def __init__(self, fn):
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def _build_layers(specs: list[LayerSpec], in_shape: tuple[int, ...], rng: np.random.Generator,
                  lif: LifParams | None) -> tuple[list[Module], list[tuple[int, ...]], list[bool]]:
    layers: list[Module] = []
    shapes: list[tuple[int, ...]] = []
    taps: list[bool] = []
    shape = tuple(in_shape)
    for spec in specs:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise BuildError(f"conv after flat layer (shape {shape})")
            layers.append(Conv2d(shape[0], spec.size, 3, rng, padding=1))
            shape = (spec.size,) + shape[1:]
        elif spec.kind == "fc":
            width = int(np.prod(shape))
            if len(shape) != 1:
                layers.append(_Fn(tn.flatten))
                shapes.append((width,))
                taps.append(False)
            layers.append(Linear(width, spec.size, rng))
            shape = (spec.size,)
        elif spec.kind in ("pool", "maxpool"):
            if len(shape) != 3 or shape[1] % spec.size or shape[2] % spec.size:
                raise BuildError(f"pool{spec.size} cannot divide shape {shape}")
            layers.append(_Pool(spec.size, "avg" if spec.kind == "pool" else "max"))
            shape = (shape[0], shape[1] // spec.size, shape[2] // spec.size)
        elif spec.kind == "relu":
            layers.append(_Fn(tn.relu))
        elif spec.kind == "lif":
            if lif is None:
                raise BuildError("lif layer in a non-spiking network")
            layers.append(LIF(lif))
        elif spec.kind == "flatten":
            layers.append(_Fn(tn.flatten))
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
        taps.append(spec.tap)
    return layers, shapes, taps


class Network(Module):
    """Feed-forward ANN: ``forward`` returns the feature pattern and the logits."""

    spiking = False

    def __init__(self, arch: str, in_shape: tuple[int, int, int], num_classes: int,
                 rng: np.random.Generator):
        self.arch = arch
        self.specs = parse_arch(arch)
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.layers, shapes, taps = _build_layers(self.specs, self.in_shape, rng, self._lif())
        self.tap_index = [i for i, tap in enumerate(taps) if tap]
        self.tap_shapes = [shapes[i] for i in self.tap_index]
        self.head = Linear(int(np.prod(shapes[-1])), num_classes, rng)

    def _lif(self) -> LifParams | None:
        return None

    @property
    def num_taps(self) -> int:
        return len(self.tap_index)

    def forward(self, x: Tensor) -> tuple[FeaturePattern, Tensor]:
        pattern = FeaturePattern()
        taps = set(self.tap_index)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i in taps:
                pattern.entries.append((i, h))
        return pattern, self.head(tn.flatten(h) if h.ndim > 2 else h)


class SpikingNetwork(Network):
    """SNN student with direct input encoding and a non-spiking averaged readout."""

    spiking = True

    def __init__(self, arch: str, in_shape: tuple[int, int, int], num_classes: int,
                 rng: np.random.Generator, lif: LifParams, T: int):
        if T < 1:
            raise BuildError(f"time steps must be >= 1, got {T}")
        self.lif = lif
        self.T = T
        super().__init__(arch, in_shape, num_classes, rng)

    def _lif(self) -> LifParams:
        return self.lif

    def _stateless_prefix(self) -> int:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, LIF):
                return i
        return len(self.layers)

    def forward(self, x: Tensor, T: int | None = None) -> StudentOutput:
        T = self.T if T is None else T
        if T < 1:
            raise ValueError(f"time steps must be >= 1, got {T}")
        for layer in self.layers:
            if isinstance(layer, LIF):
                layer.reset()
        taps = set(self.tap_index)
        prefix = self._stateless_prefix()
        # the input is constant over time, so layers ahead of the first neuron give the same output every step
        h0 = x
        prefix_taps = []
        for i in range(prefix):
            h0 = self.layers[i](h0)
            if i in taps:
                prefix_taps.append((i, h0))

        patterns, step_logits = [], []
        spikes: dict[int, list[Tensor]] = {i: [] for i, l in enumerate(self.layers) if isinstance(l, LIF)}
        for t in range(T):
            pattern = FeaturePattern(list(prefix_taps), t)
            h = h0
            for i in range(prefix, len(self.layers)):
                h = self.layers[i](h)
                if i in spikes:
                    spikes[i].append(h)
                if i in taps:
                    pattern.entries.append((i, h))
            patterns.append(pattern)
            step_logits.append(self.head(tn.flatten(h) if h.ndim > 2 else h))
        total = step_logits[0]
        for s in step_logits[1:]:
            total = tn.add(total, s)
        logits = tn.scale(total, 1.0 / T) if T > 1 else total
        return StudentOutput(patterns, logits, step_logits, spikes)


def build_teacher(arch: str, in_shape, num_classes: int, seed: int) -> Network:
    return Network(arch, in_shape, num_classes, np.random.default_rng(seed))


def build_student(arch: str, in_shape, num_classes: int, seed: int, lif: LifParams, T: int) -> SpikingNetwork:
    return SpikingNetwork(arch, in_shape, num_classes, np.random.default_rng(seed), lif, T)


def forward_teacher(net: Network, batch: Tensor, frozen: bool = True) -> tuple[FeaturePattern, Tensor]:
    if tuple(batch.shape[1:]) != net.in_shape:
        raise tn.DimensionError(f"batch {batch.shape} does not match teacher input {net.in_shape}")
    if frozen:
        with tn.no_grad():
            return net(batch)
    return net(batch)


def forward_student(net: SpikingNetwork, batch: Tensor, T: int | None = None) -> StudentOutput:
    if tuple(batch.shape[1:]) != net.in_shape:
        raise tn.DimensionError(f"batch {batch.shape} does not match student input {net.in_shape}")
    return net(batch, T)


def data_dependent_init(net: SpikingNetwork, x: np.ndarray, target_std: float) -> None:
    """Rescale and shift every conv/fc that drives a LIF layer, channel by channel, so that its
    output on ``x`` has mean 0 and standard deviation ``target_std``.

    Layers are handled in depth order, each seeing the spikes of the already adjusted layers
    beneath it. Without this a Kaiming draw can leave a layer almost silent, and then the
    surrogate window never opens and nothing trains.
    """
    drivers = {i - 1 for i, l in enumerate(net.layers) if isinstance(l, LIF) and i > 0
               and isinstance(net.layers[i - 1], (Conv2d, Linear))}
    if not drivers:
        return
    for layer in net.layers:
        if isinstance(layer, LIF):
            layer.reset()
    with tn.no_grad():
        h = Tensor(x)
        for i, layer in enumerate(net.layers):
            if i in drivers:
                y = layer(h).data
                axes = (0, 2, 3) if y.ndim == 4 else (0,)
                mu, sd = y.mean(axis=axes), y.std(axis=axes)
                gain = target_std / np.maximum(sd, 1e-8)
                w = layer.weight.data
                layer.weight.data = w * gain.reshape((-1,) + (1,) * (w.ndim - 1))
                layer.bias.data = (layer.bias.data - mu) * gain
            h = layer(h)
    for layer in net.layers:
        if isinstance(layer, LIF):
            layer.reset()

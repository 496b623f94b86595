"""Tiny configurable 3D U-Net with a tapped decoder feature map."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, concat, conv3d, instance_norm, max_pool3d, relu, upsample3d

NORMS = ("instance", "none")


@dataclass(frozen=True)
class UNetConfig:
    num_classes: int = 4
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    feature_tap_layer: int | None = None  # None -> shallowest decoder layer (depth + 1)
    init_seed: int = 0
    norm: str = "instance"  # per-sample normalisation after each 3x3x3 conv, or "none"

    @property
    def tap_layer(self):
        return self.depth + 1 if self.feature_tap_layer is None else self.feature_tap_layer

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth, base_channels and in_channels must be positive")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not 1 <= self.tap_layer <= self.depth + 1:
            raise ValueError(
                f"feature_tap_layer must be in 1..{self.depth + 1} for depth {self.depth}, "
                f"got {self.tap_layer}"
            )

    def tap_channels(self):
        """Channel count of the tapped feature map."""
        level = self.depth - (self.tap_layer - 1)
        return self.base_channels * 2 ** level


@dataclass
class NetworkOutput:
    logits: Tensor
    features: Tensor


def _conv_layout(cfg):
    """(name, cin, cout, k) for every conv, in declaration order."""
    c = cfg.base_channels
    layout = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        w = c * 2 ** i
        layout += [(f"enc{i}.conv1", cin, w, 3), (f"enc{i}.conv2", w, w, 3)]
        cin = w
    w = c * 2 ** cfg.depth
    layout += [("bottleneck.conv1", cin, w, 3), ("bottleneck.conv2", w, w, 3)]
    for i in reversed(range(cfg.depth)):
        skip = c * 2 ** i
        layout += [(f"dec{i}.conv1", w + skip, skip, 3), (f"dec{i}.conv2", skip, skip, 3)]
        w = skip
    layout.append(("head", w, cfg.num_classes, 1))
    return layout


class UNet3D:
    """Encoder/decoder with skip connections and ReLU activations.

    Each 3x3x3 conv is followed by per-sample instance normalisation unless
    the config asks for ``norm="none"``.
    """

    def __init__(self, config: UNetConfig):
        config.validate()
        self.config = config
        self.encoder_passes = 0
        rng = np.random.default_rng(config.init_seed)
        self.params = {}
        for name, cin, cout, k in _conv_layout(config):
            fan_in = cin * k ** 3
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"{name}.weight"] = Tensor(
                rng.uniform(-bound, bound, size=(cout, cin, k, k, k)), requires_grad=True,
                name=f"{name}.weight",
            )
            if config.norm == "instance" and k > 1:
                # the normalisation removes any conv bias, so it carries the shift instead
                self.params[f"{name}.norm.weight"] = Tensor(np.ones(cout), requires_grad=True, name=f"{name}.norm.weight")
                self.params[f"{name}.norm.bias"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.norm.bias")
            else:
                self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def _conv(self, name, x, padding=1):
        p = self.params
        if f"{name}.norm.weight" in p:
            y = conv3d(x, p[f"{name}.weight"], padding=padding)
            return instance_norm(y, p[f"{name}.norm.weight"], p[f"{name}.norm.bias"])
        return conv3d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=padding)

    def _block(self, prefix, x):
        x = relu(self._conv(f"{prefix}.conv1", x))
        return relu(self._conv(f"{prefix}.conv2", x))

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x) -> NetworkOutput:
        cfg = self.config
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input [B,{cfg.in_channels},D,H,W], got {x.shape}")
        divisor = 2 ** cfg.depth
        if any(n % divisor for n in x.shape[2:]):
            raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by {divisor}")
        self.encoder_passes += 1

        skips = []
        h = x
        for i in range(cfg.depth):
            h = self._block(f"enc{i}", h)
            skips.append(h)
            h = max_pool3d(h)
        h = self._block("bottleneck", h)
        taps = [h]
        for i in reversed(range(cfg.depth)):
            h = upsample3d(h)
            h = self._block(f"dec{i}", concat([h, skips[i]], axis=1))
            taps.append(h)
        logits = self._conv("head", h, padding=0)

        features = taps[cfg.tap_layer - 1]
        scale = x.shape[2] // features.shape[2]
        if scale > 1:
            features = upsample3d(features, scale)
        return NetworkOutput(logits=logits, features=features)

    # -- state --------------------------------------------------------
    def state_arrays(self):
        return [p.data for p in self.params.values()]

    def load_state_arrays(self, arrays):
        params = list(self.params.values())
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} parameter blocks, got {len(arrays)}")
        for p, arr in zip(params, arrays):
            if p.shape != arr.shape:
                raise ValueError(f"parameter {p.name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=np.float64)


def build(config: UNetConfig) -> UNet3D:
    return UNet3D(config)

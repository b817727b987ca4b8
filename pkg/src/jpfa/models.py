"""Network topologies at 32x32 grayscale scale, plus weight snapshots.

* :class:`Trunk` - shared feature extractor, frozen after source pretraining.
* :class:`HashHead` - dataset-specific extractor ending in a tanh code layer.
* :class:`Generator` - downsample / residual / upsample translator.
* :class:`Discriminator` - strided patch critic without output activation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IMAGE_SIZE = 32
DEFAULT_CODE_LENGTH = 64


class Module:
    """Holds an ordered mapping of named parameter tensors."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def _conv(self, name, rng, c_out, c_in, k, bias=True):
        fan_in = c_in * k * k
        self._add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        if bias:
            self._add(f"{name}.bias", np.zeros(c_out))

    def _dense(self, name, rng, d_in, d_out, gain=2.0):
        self._add(f"{name}.weight", rng.normal(0.0, np.sqrt(gain / d_in), (d_in, d_out)))
        self._add(f"{name}.bias", np.zeros(d_out))

    def conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        return ad.conv2d(x, self.params[f"{name}.weight"], stride, padding, bias=self.params.get(f"{name}.bias"))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict keys do not match parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{k}: snapshot shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def checksum(self) -> str:
        return state_checksum(self.state_dict())

    def __call__(self, x):
        return self.forward(x)


def _check_images(x: Tensor, who: str, size: int = IMAGE_SIZE) -> None:
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (size, size):
        raise ad.ShapeError(f"{who}: expected images of shape (N, 1, {size}, {size}), got {x.shape}")


class Trunk(Module):
    """Three conv3x3 + relu + maxpool blocks, widths 8/16/32: (N,1,32,32) -> (N,32,4,4)."""

    widths = (8, 16, 32)
    output_shape = (32, 4, 4)

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        c_in = 1
        for i, c in enumerate(self.widths):
            self._conv(f"conv{i}", rng, c, c_in, 3)
            c_in = c
        self.frozen = False

    def forward(self, x: Tensor) -> Tensor:
        _check_images(x, "trunk")
        for i in range(len(self.widths)):
            x = ad.maxpool2d(ad.relu(self.conv(f"conv{i}", x, padding=1)), 2, 2)
        return x

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True


class HashHead(Module):
    """conv3x3(64) + relu + maxpool, then FC 256->128 relu, FC 128->K tanh."""

    def __init__(self, code_length: int = DEFAULT_CODE_LENGTH, seed: int = 0, role: str = "source"):
        super().__init__()
        self.code_length = code_length
        self.role = role
        rng = np.random.default_rng(seed)
        c, h, w = Trunk.output_shape
        self._conv("conv", rng, 64, c, 3)
        self._dense("fc1", rng, 64 * (h // 2) * (w // 2), 128)
        self._dense("fc2", rng, 128, code_length, gain=1.0)

    def forward_with_pre(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(code, pre_activation)``."""
        if features.data.ndim != 4 or features.shape[1:] != Trunk.output_shape:
            raise ad.ShapeError(f"head: expected trunk features (N, {Trunk.output_shape}), got {features.shape}")
        x = ad.maxpool2d(ad.relu(self.conv("conv", features, padding=1)), 2, 2)
        x = ad.reshape(x, (x.shape[0], -1))
        x = ad.relu(ad.dense(x, self.params["fc1.weight"], self.params["fc1.bias"]))
        pre = ad.dense(x, self.params["fc2.weight"], self.params["fc2.bias"])
        return ad.tanh(pre), pre

    def forward(self, features: Tensor) -> Tensor:
        return self.forward_with_pre(features)[0]


def trunk_forward(trunk: Trunk, images) -> Tensor:
    return trunk(ad.as_tensor(images))


def head_forward(head: HashHead, features) -> Tensor:
    return head(ad.as_tensor(features))


class Generator(Module):
    """7x7 stem, two stride-2 downsamples, residual blocks, two nearest-upsample convs, 7x7 tanh out.

    The input also reaches the output through a global skip in tanh space,
    ``out = tanh(convs(x) + atanh(skip_gain * x))``, so a freshly initialized
    generator is close to the identity map and training only learns the
    style change.
    """

    skip_gain = 0.98

    def __init__(self, seed: int = 0, width: int = 8, n_res: int = 3, direction: str = "X->Y"):
        super().__init__()
        self.direction = direction
        self.n_res = n_res
        rng = np.random.default_rng(seed)
        w = width
        self._conv("stem", rng, w, 1, 7)
        self._conv("down1", rng, 2 * w, w, 3)
        self._conv("down2", rng, 4 * w, 2 * w, 3)
        for i in range(n_res):
            self._conv(f"res{i}a", rng, 4 * w, 4 * w, 3)
            self._conv(f"res{i}b", rng, 4 * w, 4 * w, 3)
            # small second conv keeps each block near identity at init
            self.params[f"res{i}b.weight"].data *= 0.1
        self._conv("up1", rng, 2 * w, 4 * w, 3)
        self._conv("up2", rng, w, 2 * w, 3)
        self._conv("out", rng, 1, w, 7)
        self.params["out.weight"].data *= 0.1

    def forward(self, x: Tensor) -> Tensor:
        _check_images(x, "generator")
        h = ad.relu(self.conv("stem", x, padding=3))
        h = ad.relu(self.conv("down1", h, stride=2, padding=1))
        h = ad.relu(self.conv("down2", h, stride=2, padding=1))
        for i in range(self.n_res):
            r = ad.relu(self.conv(f"res{i}a", h, padding=1))
            h = ad.add(h, self.conv(f"res{i}b", r, padding=1))
        h = ad.relu(self.conv("up1", ad.upsample2d(h), padding=1))
        h = ad.relu(self.conv("up2", ad.upsample2d(h), padding=1))
        skip = ad.atanh(ad.scale(x, self.skip_gain))
        return ad.tanh(ad.add(self.conv("out", h, padding=3), skip))


def generate(gen: Generator, image) -> Tensor:
    return gen(ad.as_tensor(image))


class Discriminator(Module):
    """Three 4x4 stride-2 convs (16, 32, 1 channels): 32x32 image -> 4x4 score grid."""

    widths = (16, 32, 1)

    def __init__(self, seed: int = 0, domain: str = "Y"):
        super().__init__()
        self.domain = domain
        rng = np.random.default_rng(seed)
        c_in = 1
        for i, c in enumerate(self.widths):
            self._conv(f"conv{i}", rng, c, c_in, 4)
            c_in = c

    @staticmethod
    def grid_size(size: int = IMAGE_SIZE) -> int:
        for _ in Discriminator.widths:
            size = (size + 2 - 4) // 2 + 1
        return size

    def forward(self, x: Tensor) -> Tensor:
        _check_images(x, "discriminator")
        last = len(self.widths) - 1
        for i in range(len(self.widths)):
            x = self.conv(f"conv{i}", x, stride=2, padding=1)
            if i < last:
                x = ad.leaky_relu(x, 0.2)
        return x


def discriminate(d: Discriminator, image) -> Tensor:
    return d(ad.as_tensor(image))


# ---------------------------------------------------------------------------
# snapshots

_MAGIC = b"JPFAW001"


def state_checksum(state) -> str:
    h = hashlib.sha256()
    for name, arr in state.items():
        h.update(name.encode())
        h.update(np.asarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_weights(path, modules: dict[str, Module] | dict[str, dict]) -> str:
    """Write named parameter groups to ``path``; returns the file's sha256.

    Layout: 8-byte magic, little-endian uint64 header length, JSON header
    listing ``[name, shape]`` in storage order, then the raw ``<f8`` values.
    """
    flat: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for group, mod in modules.items():
        state = mod.state_dict() if isinstance(mod, Module) else mod
        for k, v in state.items():
            flat[f"{group}/{k}"] = np.asarray(v, dtype="<f8")
    header = json.dumps({"tensors": [[k, list(v.shape)] for k, v in flat.items()]}).encode()
    payload = b"".join(v.tobytes() for v in flat.values())
    blob = _MAGIC + struct.pack("<Q", len(header)) + header + payload
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_weights(path) -> dict[str, "OrderedDict[str, np.ndarray]"]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a weight snapshot")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    offset = 16 + hlen
    groups: dict[str, OrderedDict] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        group, key = name.split("/", 1)
        groups.setdefault(group, OrderedDict())[key] = arr
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return groups

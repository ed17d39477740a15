"""3D U-Net with multi-scale supervision heads, initialisation and checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class InvalidConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 16
    supervision_scales: int = 3
    in_channels: int = 1
    out_channels: int = 1
    normalization: str = "none"

    def validate(self) -> None:
        if self.depth < 2:
            raise InvalidConfigError("depth must be at least 2")
        if not 1 <= self.supervision_scales <= self.depth - 1:
            raise InvalidConfigError(
                f"supervision_scales must lie in [1, {self.depth - 1}], got {self.supervision_scales}"
            )
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise InvalidConfigError("channel counts must be positive")
        if self.normalization not in ("none", "batch"):
            raise InvalidConfigError(f"unknown normalization {self.normalization!r}")

    @property
    def divisor(self) -> int:
        """Spatial patch dims must be multiples of this."""
        return 2 ** (self.depth - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def conv_layout(cfg: NetworkConfig) -> list[tuple[str, int, int, int]]:
    """Ordered (name, in_channels, out_channels, kernel) for every convolution."""
    layers = []
    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        ch = cfg.channels(lvl)
        layers.append((f"enc{lvl}.conv1", cin, ch, 3))
        layers.append((f"enc{lvl}.conv2", ch, ch, 3))
        cin = ch
    for lvl in range(cfg.depth - 2, -1, -1):
        ch = cfg.channels(lvl)
        layers.append((f"dec{lvl}.up", cfg.channels(lvl + 1), ch, 3))
        layers.append((f"dec{lvl}.conv1", 2 * ch, ch, 3))
        layers.append((f"dec{lvl}.conv2", ch, ch, 3))
    for scale in range(1, cfg.supervision_scales + 1):
        lvl = scale - 1
        layers.append((f"head{scale}", cfg.channels(lvl), cfg.out_channels, 1))
    return layers


@dataclass
class Parameters:
    """Named network tensors in a fixed order, plus batch-norm running stats."""

    config: NetworkConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.config,
            {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


def build(config: NetworkConfig, seed: int, dtype=np.float64) -> Parameters:
    """Kaiming-normal kernels, zero biases; identical output for identical seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, cin, cout, k in conv_layout(config):
        fan_in = cin * k ** 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))
        tensors[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight")
        tensors[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
        if config.normalization == "batch" and not name.startswith("head"):
            tensors[f"{name}.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
            tensors[f"{name}.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            buffers[f"{name}.mean"] = np.zeros(cout, dtype=dtype)
            buffers[f"{name}.var"] = np.ones(cout, dtype=dtype)
    return Parameters(config, tensors, buffers)


@dataclass
class MultiScaleOutput:
    """Per-scale sigmoid maps at label resolution; index 0 is scale 1 (finest)."""

    scales: list[Tensor]

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, i: int) -> Tensor:
        return self.scales[i]

    @property
    def finest(self) -> Tensor:
        return self.scales[0]


_BN_MOMENTUM = 0.1


def _conv_block(params: Parameters, name: str, x: Tensor, training: bool) -> Tensor:
    y = ad.conv3d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=1)
    if params.config.normalization == "batch":
        gamma, beta = params[f"{name}.gamma"], params[f"{name}.beta"]
        if training:
            axes = (0, 2, 3, 4)
            mean_key, var_key = f"{name}.mean", f"{name}.var"
            params.buffers[mean_key] = (1 - _BN_MOMENTUM) * params.buffers[mean_key] + _BN_MOMENTUM * y.data.mean(axis=axes)
            params.buffers[var_key] = (1 - _BN_MOMENTUM) * params.buffers[var_key] + _BN_MOMENTUM * y.data.var(axis=axes)
            y = ad.channel_norm(y, gamma, beta)
        else:
            y = ad.channel_norm(y, gamma, beta, stats=(params.buffers[f"{name}.mean"], params.buffers[f"{name}.var"]))
    return ad.relu(y)


def forward(params: Parameters, x, training: bool = False) -> MultiScaleOutput:
    """Run the encoder-decoder; returns ``supervision_scales`` probability maps.

    ``training`` only matters with batch normalisation (batch statistics and
    running-stat updates vs. frozen running stats).
    """
    cfg = params.config
    x = ad.as_tensor(x)
    if x.data.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ad.ShapeMismatchError(f"expected (batch, {cfg.in_channels}, X, Y, Z), got {x.shape}")
    spatial = x.shape[2:]
    if any(n % cfg.divisor for n in spatial):
        raise ad.ShapeMismatchError(f"spatial dims {spatial} must be divisible by {cfg.divisor}")

    skips = []
    h = x
    for lvl in range(cfg.depth):
        if lvl > 0:
            h = ad.max_pool3d(h)
        h = _conv_block(params, f"enc{lvl}.conv1", h, training)
        h = _conv_block(params, f"enc{lvl}.conv2", h, training)
        skips.append(h)

    decoded: dict[int, Tensor] = {}
    for lvl in range(cfg.depth - 2, -1, -1):
        h = _conv_block(params, f"dec{lvl}.up", ad.upsample(h, 2), training)
        h = ad.concat([skips[lvl], h], axis=1)
        h = _conv_block(params, f"dec{lvl}.conv1", h, training)
        h = _conv_block(params, f"dec{lvl}.conv2", h, training)
        decoded[lvl] = h

    outputs = []
    for scale in range(1, cfg.supervision_scales + 1):
        lvl = scale - 1
        logits = ad.conv3d(decoded[lvl], params[f"head{scale}.weight"], params[f"head{scale}.bias"], padding=0)
        prob = ad.sigmoid(logits)
        if lvl > 0:
            prob = ad.upsample(prob, size=spatial)
        outputs.append(prob)
    return MultiScaleOutput(outputs)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u64 header length | JSON header | payload
# The JSON header echoes the network config and lists every tensor as
# (group, name, shape, dtype, offset, nbytes) into the little-endian payload.

MAGIC = b"VSEGCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    params: Parameters
    optimizer: dict[str, Any] | None
    epoch: int
    rng_state: dict[str, Any]
    extra: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path, params: Parameters, optimizer: dict[str, Any] | None, epoch: int,
                    rng_state: dict[str, Any], extra: dict[str, Any] | None = None) -> None:
    """Write params, optimizer state and rng state to one versioned file.

    ``optimizer`` is a dict of scalar fields plus ``"moments"``: a mapping of
    name to array (see ``trainer.AdamState.to_dict``).
    """
    table = []
    payload = io.BytesIO()

    def add(group: str, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"group": group, "name": name, "shape": list(arr.shape),
                      "dtype": le.dtype.str, "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)

    for name, t in params.tensors.items():
        add("param", name, t.data)
    for name, arr in params.buffers.items():
        add("buffer", name, arr)
    opt_meta = None
    if optimizer is not None:
        opt_meta = {k: v for k, v in optimizer.items() if k != "moments"}
        for name, arr in optimizer.get("moments", {}).items():
            add("moment", name, arr)

    header = json.dumps({
        "config": asdict(params.config),
        "epoch": epoch,
        "rng_state": rng_state,
        "optimizer": opt_meta,
        "extra": extra or {},
        "tensors": table,
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 12
    if len(raw) < fixed or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack("<IQ", raw[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if len(raw) < fixed + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[fixed:fixed + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header") from exc
    body = memoryview(raw)[fixed + hlen:]

    config = NetworkConfig(**header["config"])
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    moments: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(body[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
        if entry["group"] == "param":
            tensors[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        elif entry["group"] == "buffer":
            buffers[entry["name"]] = arr
        else:
            moments[entry["name"]] = arr
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = dict(header["optimizer"], moments=moments)
    return Checkpoint(Parameters(config, tensors, buffers), optimizer, header["epoch"],
                      header["rng_state"], header.get("extra", {}))

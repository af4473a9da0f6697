"""The 8-learned-layer bitemporal 3D-CNN.

Input layout is [batch, bands, time, height, width]. The first convolution
spans both timestamps, so depth collapses to 1 after layer 1 and the
remaining convolutions act spatially.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from lsw import ops
from lsw.tensor import Tensor

LEARNED_LAYERS = 8
CHECKPOINT_MAGIC = b"LSNW"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: tuple[int, int, int] = (1, 3, 3)
    padding: tuple[int, int, int] = (0, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)
    pool: tuple[int, int, int] | None = (1, 2, 2)
    global_pool: bool = False


def _ledger_conv(widths=(16, 32, 64, 64, 128), pools: int = 4, time_steps: int = 2) -> tuple[ConvLayer, ...]:
    layers = []
    for i, w in enumerate(widths):
        last = i == len(widths) - 1
        layers.append(
            ConvLayer(
                out_channels=w,
                kernel=(time_steps if i == 0 else 1, 3, 3),
                pool=(1, 2, 2) if i < pools and not last else None,
                global_pool=last,
            )
        )
    return tuple(layers)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description; parameter shapes follow from it alone."""

    tile_size: int = 512
    input_bands: int = 5
    time_steps: int = 2
    conv: tuple[ConvLayer, ...] = field(default_factory=_ledger_conv)
    dense: tuple[int, ...] = (64, 16, 1)
    init_seed: int = 0

    @classmethod
    def ledger(
        cls,
        tile_size: int = 512,
        input_bands: int = 5,
        widths=(16, 32, 64, 64, 128),
        dense=(64, 16, 1),
        pools: int = 4,
        init_seed: int = 0,
    ) -> "NetworkConfig":
        """The default 5-conv + 3-dense stack, optionally narrowed or with fewer pools."""
        cfg = cls(
            tile_size=tile_size,
            input_bands=input_bands,
            conv=_ledger_conv(tuple(widths), pools),
            dense=tuple(dense),
            init_seed=init_seed,
        )
        cfg.validate()
        return cfg

    @classmethod
    def desk_scale(cls, init_seed: int = 0) -> "NetworkConfig":
        return cls.ledger(tile_size=64, init_seed=init_seed)

    @property
    def pool_factor(self) -> int:
        f = 1
        for layer in self.conv:
            if layer.pool is not None:
                f *= layer.pool[1]
        return f

    def validate(self) -> None:
        n = len(self.conv) + len(self.dense)
        if n != LEARNED_LAYERS:
            raise ConfigError(f"network must have exactly {LEARNED_LAYERS} learned layers, got {n}")
        if not self.conv or not self.dense:
            raise ConfigError("need at least one convolutional and one dense layer")
        first = self.conv[0]
        if first.kernel[0] != self.time_steps or first.padding[0] != 0:
            raise ConfigError(
                f"first convolution must span all {self.time_steps} timestamps without depth padding"
            )
        if not self.conv[-1].global_pool:
            raise ConfigError("last convolution must end in global average pooling")
        if self.dense[-1] != 1:
            raise ConfigError(f"final layer must output a single logit, got {self.dense[-1]}")
        if self.tile_size % self.pool_factor:
            raise ConfigError(
                f"tile_size {self.tile_size} is not divisible by the cumulative pooling factor {self.pool_factor}"
            )
        self.layer_shapes()

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shapes after each learned layer (batch axis dropped)."""
        shape = (self.input_bands, self.time_steps, self.tile_size, self.tile_size)
        shapes = []
        try:
            for layer in self.conv:
                dhw = ops.conv_output_shape(shape[1:], layer.kernel, layer.stride, layer.padding)
                if layer.pool is not None:
                    dhw = ops.pool_output_shape(dhw, layer.pool, layer.pool)
                shape = (layer.out_channels, *dhw)
                if layer.global_pool:
                    shape = (layer.out_channels,)
                shapes.append(shape)
        except ops.ShapeError as exc:
            raise ConfigError(f"architecture does not fit tile {self.tile_size}: {exc}") from None
        for width in self.dense:
            shape = (width,)
            shapes.append(shape)
        return shapes

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        c = self.input_bands
        for layer in self.conv:
            shapes += [(layer.out_channels, c, *layer.kernel), (layer.out_channels,)]
            c = layer.out_channels
        for width in self.dense:
            shapes += [(c, width), (width,)]
            c = width
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        conv = tuple(
            ConvLayer(
                out_channels=c["out_channels"],
                kernel=tuple(c["kernel"]),
                padding=tuple(c["padding"]),
                stride=tuple(c["stride"]),
                pool=None if c["pool"] is None else tuple(c["pool"]),
                global_pool=c["global_pool"],
            )
            for c in d["conv"]
        )
        return cls(
            tile_size=d["tile_size"],
            input_bands=d["input_bands"],
            time_steps=d["time_steps"],
            conv=conv,
            dense=tuple(d["dense"]),
            init_seed=d["init_seed"],
        )


def _param_names(config: NetworkConfig) -> list[str]:
    names = []
    for i in range(len(config.conv)):
        names += [f"conv{i + 1}.weight", f"conv{i + 1}.bias"]
    for j in range(len(config.dense)):
        k = len(config.conv) + j + 1
        names += [f"dense{k}.weight", f"dense{k}.bias"]
    return names


class Network:
    """Parameters for a :class:`NetworkConfig`, in ledger order (weight, bias per layer)."""

    def __init__(self, config: NetworkConfig, params: list[Tensor]):
        expected = config.param_shapes()
        got = [p.shape for p in params]
        if got != expected:
            raise ConfigError(f"parameter shapes {got} do not match config {expected}")
        self.config = config
        self.params = params

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def dtype(self):
        return self.params[0].dtype

    def forward(self, batch) -> Tensor:
        return forward(self, batch)

    def copy(self) -> "Network":
        return Network(self.config, [Tensor(p.data.copy(), True, dtype=p.dtype, name=p.name) for p in self.params])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p.data)) for p in self.params)


def build_network(config: NetworkConfig, dtype=np.float32) -> Network:
    """Fresh network with He-normal weights (std sqrt(2/fan_in)) and zero biases."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    params = []
    for name, shape in zip(_param_names(config), config.param_shapes()):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params.append(Tensor(data.astype(dtype), requires_grad=True, dtype=dtype, name=name))
    return Network(config, params)


def forward(net: Network, batch) -> Tensor:
    """Probabilities [N] for a batch [N, bands, time, tile, tile]."""
    cfg = net.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=net.dtype), dtype=net.dtype)
    expected = (cfg.input_bands, cfg.time_steps, cfg.tile_size, cfg.tile_size)
    if x.data.ndim != 5 or x.shape[1:] != expected:
        raise ops.ShapeError(f"expected batch shape [N, {', '.join(map(str, expected))}], got {list(x.shape)}")
    p = iter(net.params)
    for layer in cfg.conv:
        x = ops.relu(ops.conv3d(x, next(p), next(p), layer.stride, layer.padding))
        if layer.pool is not None:
            x = ops.maxpool3d(x, layer.pool)
        if layer.global_pool:
            x = ops.global_avg_pool(x)
    for i, _ in enumerate(cfg.dense):
        x = ops.affine(x, next(p), next(p))
        x = ops.relu(x) if i < len(cfg.dense) - 1 else ops.sigmoid(x)
    return ops.reshape(x, (x.shape[0],))


def stack_pairs(pairs, dtype=np.float32) -> np.ndarray:
    """[N, bands, 2, T, T] batch from pairs exposing ``before``/``after`` band stacks."""
    return np.stack([np.stack([p.before, p.after], axis=1) for p in pairs]).astype(dtype, copy=False)


@dataclass(frozen=True)
class Prediction:
    probability: float
    label: int
    threshold: float = 0.5


def classify(probability: float, threshold: float = 0.5) -> Prediction:
    return Prediction(float(probability), int(probability >= threshold), threshold)


def predict(net: Network, pair, threshold: float = 0.5) -> Prediction:
    prob = forward(net, stack_pairs([pair], net.dtype)).data[0]
    return classify(prob, threshold)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(net: Network, path) -> None:
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)), cfg]
    chunks.append(struct.pack("<I", len(net.params)))
    for p in net.params:
        chunks.append(struct.pack(f"<B{p.data.ndim}I", p.data.ndim, *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Network:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, n = struct.unpack_from("<HI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 10
        config = NetworkConfig.from_dict(json.loads(buf[off : off + n]))
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        names = _param_names(config)
        expected = config.param_shapes()
        if count != len(expected):
            raise CheckpointError(f"{path}: {count} tensors stored, config needs {len(expected)}")
        params = []
        for name, want in zip(names, expected):
            (ndim,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
            off += 1 + 4 * ndim
            if tuple(shape) != want:
                raise CheckpointError(f"{path}: {name} has shape {shape}, config needs {want}")
            nbytes = 4 * int(np.prod(shape))
            if off + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated at {name}")
            data = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
            off += nbytes
            params.append(Tensor(data.astype(np.float32), requires_grad=True, name=name))
    except (struct.error, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return Network(config, params)


def with_seed(config: NetworkConfig, seed: int) -> NetworkConfig:
    return replace(config, init_seed=int(seed))

"""Desk-scale model families over one flat, module-tagged parameter vector.

Every trainable tensor is a view into ``ParamRegistry.flat`` (and its grad
into ``ParamRegistry.grad``), so snapshot, restore, masking and optimizer
steps all work on a single contiguous array.

Checkpoint layout (all integers little-endian)::

    offset  size      field
    0       8         magic b"DGPRCKPT"
    8       4         uint32 format version (currently 1)
    12      4         uint32 header length L
    16      L         UTF-8 JSON header: {"config", "seed", "n_params", "entries", "extra"}
    16+L    8*n       float64 LE parameter vector
    ...     ceil(n/8) alive-mask bitset, bit i of byte i//8 (LSB first) = parameter i alive
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

TAGS = ("encoder", "decoder", "head")
FAMILIES = ("mlp", "encdec")
CHECKPOINT_MAGIC = b"DGPRCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegistryEntry:
    param_id: int
    layer: str
    tag: str
    offset: int
    length: int
    shape: tuple


class ParamRegistry:
    """Flat view of all trainable parameters plus their alive mask."""

    def __init__(self, layout):
        entries, offset = [], 0
        for pid, (layer, tag, shape) in enumerate(layout):
            if tag not in TAGS:
                raise ConfigError(f"unknown module tag {tag!r} for {layer}")
            length = int(np.prod(shape))
            entries.append(RegistryEntry(pid, layer, tag, offset, length, tuple(shape)))
            offset += length
        self.entries: list[RegistryEntry] = entries
        self.flat = np.zeros(offset)
        self.grad = np.zeros(offset)
        self.mask = np.ones(offset, dtype=bool)
        self.params: list[Tensor] = []
        self.tags = np.empty(offset, dtype=object)
        for e in entries:
            sl = slice(e.offset, e.offset + e.length)
            t = Tensor(self.flat[sl].reshape(e.shape), requires_grad=True, name=e.layer)
            t.grad = self.grad[sl].reshape(e.shape)
            self.params.append(t)
            self.tags[sl] = e.tag
        self.check_partition()

    def __len__(self) -> int:
        return self.flat.size

    def check_partition(self) -> None:
        pos = 0
        for e in self.entries:
            if e.offset != pos or e.length < 1:
                raise AssertionError(f"registry entry {e.layer} breaks the flat partition at {pos}")
            pos += e.length
        if pos != self.flat.size:
            raise AssertionError("registry entries do not cover the flat vector")
        if len({id(p) for p in self.params}) != len(self.params):
            raise AssertionError("a parameter tensor is registered twice")
        for p, e in zip(self.params, self.entries):
            if not np.shares_memory(p.data, self.flat):
                raise AssertionError(f"{e.layer} no longer views the flat vector")

    def entry(self, layer: str) -> RegistryEntry:
        for e in self.entries:
            if e.layer == layer:
                return e
        raise KeyError(layer)

    def param(self, layer: str) -> Tensor:
        return self.params[self.entry(layer).param_id]

    def tag_indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)

    def scope_indices(self, scope: str) -> np.ndarray:
        """Flat indices covered by a prune scope: ``all`` or a single tag."""
        if scope == "all":
            return np.arange(self.flat.size)
        if scope not in TAGS:
            raise ConfigError(f"unknown scope {scope!r}")
        return self.tag_indices(scope)

    def counts(self) -> dict[str, int]:
        return {tag: int((self.tags == tag).sum()) for tag in TAGS}

    def alive_counts(self) -> dict[str, int]:
        return {tag: int(self.mask[self.tags == tag].sum()) for tag in TAGS}

    def alive_fractions(self) -> dict[str, float]:
        totals, alive = self.counts(), self.alive_counts()
        return {t: (alive[t] / totals[t] if totals[t] else 1.0) for t in TAGS}

    def layer_alive_fractions(self) -> dict[str, float]:
        return {e.layer: float(self.mask[e.offset:e.offset + e.length].mean()) for e in self.entries}

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def snapshot(self) -> np.ndarray:
        return self.flat.copy()

    def restore(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self.flat.shape:
            raise ValueError(f"restore: expected {self.flat.size} values, got {vec.size}")
        self.flat[...] = vec


@dataclass
class ModelConfig:
    """``widths`` are hidden widths (mlp) or per-level channels (encdec).

    ``n_outputs`` is the class count (mlp) or the category count (encdec,
    which adds one background channel).
    """

    family: str
    input_shape: tuple
    widths: list
    n_outputs: int
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.widths = [int(w) for w in self.widths]
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.widths:
            raise ConfigError("depth must be >= 1")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be >= 1, got {self.widths}")
        if self.n_outputs < 1:
            raise ConfigError("n_outputs must be >= 1")
        if self.family == "mlp" and len(self.input_shape) != 1:
            raise ConfigError(f"mlp input_shape must be (d,), got {self.input_shape}")
        if self.family == "encdec":
            if len(self.input_shape) != 3:
                raise ConfigError(f"encdec input_shape must be (C, H, W), got {self.input_shape}")
            step = 2 ** (len(self.widths) - 1)
            if self.input_shape[1] % step or self.input_shape[2] % step:
                raise ConfigError(f"encdec spatial size must be divisible by {step}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Model:
    config: ModelConfig
    registry: ParamRegistry = field(repr=False)

    def forward(self, x) -> Tensor:
        raise NotImplementedError

    __call__ = forward

    def layout(self):
        raise NotImplementedError

    def init_params(self) -> None:
        raise NotImplementedError


class MLP(Model):
    """ReLU multilayer perceptron returning class logits.

    Hidden layers are tagged ``encoder``; the output layer is ``head``.
    Weights are stored as ``(fan_in, fan_out)``.
    """

    @staticmethod
    def layout_for(cfg: ModelConfig):
        sizes = [cfg.input_shape[0], *cfg.widths, cfg.n_outputs]
        out = []
        for i in range(len(sizes) - 1):
            tag = "head" if i == len(sizes) - 2 else "encoder"
            out.append((f"fc{i}.weight", tag, (sizes[i], sizes[i + 1])))
            out.append((f"fc{i}.bias", tag, (sizes[i + 1],)))
        return out

    def init_params(self) -> None:
        rng = np.random.default_rng(self.config.seed)
        n_layers = len(self.registry.params) // 2
        for i in range(n_layers):
            w = self.registry.params[2 * i]
            fan_in, fan_out = w.shape
            if i == n_layers - 1:
                w.data[...] = _glorot_uniform(rng, w.shape, fan_in, fan_out)
            else:
                w.data[...] = _he_uniform(rng, w.shape, fan_in)
            self.registry.params[2 * i + 1].data[...] = 0.0

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.input_shape[0]:
            raise ShapeError(f"mlp expects (N, {self.config.input_shape[0]}), got {x.shape}")
        ps = self.registry.params
        n_layers = len(ps) // 2
        h = x
        for i in range(n_layers):
            h = ad.bias_add(ad.matmul(h, ps[2 * i]), ps[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    __call__ = forward


class EncoderDecoder(Model):
    """U-Net-shaped encoder/decoder with one concat skip per level.

    Encoder: a 3x3 conv + ReLU per level, 2x2 max-pool between levels.
    Decoder: upsample, concat the matching encoder output, 3x3 conv + ReLU.
    Head: 1x1 conv to ``n_outputs + 1`` channels followed by a sigmoid; the
    last channel is background.
    """

    @staticmethod
    def layout_for(cfg: ModelConfig):
        ch = cfg.widths
        out = []
        cin = cfg.input_shape[0]
        for i, c in enumerate(ch):
            out.append((f"enc{i}.weight", "encoder", (c, cin, 3, 3)))
            out.append((f"enc{i}.bias", "encoder", (c,)))
            cin = c
        for i in range(len(ch) - 2, -1, -1):
            cin_dec = cin + ch[i]
            out.append((f"dec{i}.weight", "decoder", (ch[i], cin_dec, 3, 3)))
            out.append((f"dec{i}.bias", "decoder", (ch[i],)))
            cin = ch[i]
        out.append(("head.weight", "head", (cfg.n_outputs + 1, cin, 1, 1)))
        out.append(("head.bias", "head", (cfg.n_outputs + 1,)))
        return out

    def init_params(self) -> None:
        rng = np.random.default_rng(self.config.seed)
        reg = self.registry
        for e, p in zip(reg.entries, reg.params):
            if e.layer.endswith(".bias"):
                p.data[...] = 0.0
                continue
            cout, cin, k, _ = p.shape
            if e.tag == "head":
                p.data[...] = _glorot_uniform(rng, p.shape, cin * k * k, cout * k * k)
            else:
                p.data[...] = _he_uniform(rng, p.shape, cin * k * k)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        expect = self.config.input_shape
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ShapeError(f"encdec expects (N, {', '.join(map(str, expect))}), got {x.shape}")
        reg = self.registry
        levels = self.config.depth
        skips = []
        h = x
        for i in range(levels):
            if i > 0:
                h = ad.max_pool2d(h)
            h = ad.relu(ad.conv2d(h, reg.param(f"enc{i}.weight"), reg.param(f"enc{i}.bias")))
            skips.append(h)
        for i in range(levels - 2, -1, -1):
            h = ad.concat([ad.upsample2d(h), skips[i]], axis=1)
            h = ad.relu(ad.conv2d(h, reg.param(f"dec{i}.weight"), reg.param(f"dec{i}.bias")))
        return ad.sigmoid(ad.conv2d(h, reg.param("head.weight"), reg.param("head.bias")))

    __call__ = forward


_FAMILY_CLASSES = {"mlp": MLP, "encdec": EncoderDecoder}


def build_model(config: ModelConfig) -> Model:
    cls = _FAMILY_CLASSES[config.family]
    model = cls(config, ParamRegistry(cls.layout_for(config)))
    model.init_params()
    return model


def first_layer_fanout(model: Model, coordinate: int) -> np.ndarray:
    """Flat indices of the first-layer MLP weights leaving one input coordinate."""
    if model.config.family != "mlp":
        raise ConfigError("fan-out of an input coordinate is defined for mlp models")
    e = model.registry.entry("fc0.weight")
    _, width = e.shape
    return e.offset + coordinate * width + np.arange(width)


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    reg = model.registry
    header = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "n_params": len(reg),
        "entries": [[e.layer, e.tag, e.offset, e.length] for e in reg.entries],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)),
        hbytes,
        reg.flat.astype("<f8").tobytes(),
        np.packbits(reg.mask, bitorder="little").tobytes(),
    ])
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[Model, dict]:
    """Return the restored model and the header's ``extra`` dict."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    model = build_model(ModelConfig(**header["config"]))
    n = header["n_params"]
    if n != len(model.registry):
        raise ValueError(f"{path}: header says {n} parameters, config builds {len(model.registry)}")
    pos = 16 + hlen
    model.registry.restore(np.frombuffer(blob[pos:pos + 8 * n], dtype="<f8"))
    pos += 8 * n
    bits = np.frombuffer(blob[pos:pos + (n + 7) // 8], dtype=np.uint8)
    model.registry.mask[...] = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    return model, header.get("extra", {})

"""FasterNet family: configuration, builder, inference, BN folding, manifests.

A network is a flat sequence of entries. An entry is either a single layer or
a :class:`Block`, a residual group whose output is added to its input. The
same structure serializes to a *manifest*: a JSON list whose items are layer
strings (``"Conv_4_40_4"``, ``"BN"``, ``"GELU"``) or lists of layer strings
(one per residual block).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ShapeError, SpecError
from .operators import (BNParams, ConvSpec, ConvWeights, activation, bn_forward, conv_forward,
                        fold_bn_into_conv, format_ratio, fully_connected, global_avg_pool,
                        init_conv_weights, parse_notation, residual_add)
from .tensor import DTYPE, Tensor, load_tensor, save_tensor, splitmix64, uniform_buffer

ACTIVATIONS = {"gelu": "GELU", "relu": "ReLU"}
HEAD_WIDTH = 1280


@dataclass(frozen=True)
class ArchConfig:
    base_width: int
    blocks: tuple = (1, 2, 8, 2)
    activation: str = "gelu"
    ratio: float = 0.25
    num_classes: int = 1000
    head_width: int = HEAD_WIDTH
    in_channels: int = 3
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        if self.base_width < 1 or self.num_classes < 1 or self.head_width < 1:
            raise ConfigError("widths and class count must be positive")
        if len(self.blocks) != 4 or any(b < 0 for b in self.blocks):
            raise ConfigError(f"need four non-negative block counts, got {self.blocks}")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"partial ratio must be in (0, 1], got {self.ratio}")

    @property
    def widths(self) -> tuple:
        return tuple(self.base_width * 2 ** i for i in range(4))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d


VARIANTS = {
    "T0": ArchConfig(40, (1, 2, 8, 2), "gelu", name="T0"),
    "T1": ArchConfig(64, (1, 2, 8, 2), "gelu", name="T1"),
    "T2": ArchConfig(96, (1, 2, 8, 2), "relu", name="T2"),
    "S": ArchConfig(128, (1, 2, 13, 2), "relu", name="S"),
    "M": ArchConfig(144, (3, 4, 18, 3), "relu", name="M"),
    "L": ArchConfig(192, (3, 4, 18, 3), "relu", name="L"),
}


def variant_config(name: str, num_classes: int = 1000) -> ArchConfig:
    key = name.upper().removeprefix("FASTERNET-")
    if key not in VARIANTS:
        raise ConfigError(f"unknown FasterNet variant {name!r}; choose from {', '.join(VARIANTS)}")
    return replace(VARIANTS[key], num_classes=num_classes)


def config_from_json(obj: dict) -> ArchConfig:
    """Parse ``{"variant": "T0"}`` or ``{"custom": {...}}`` plus optional ``num_classes``."""
    num_classes = int(obj.get("num_classes", 1000))
    if "variant" in obj:
        return variant_config(obj["variant"], num_classes)
    if "custom" in obj:
        c = obj["custom"]
        try:
            widths = c["widths"]
            base = widths[0] if isinstance(widths, list) else int(widths)
            if isinstance(widths, list) and list(widths) != [base * 2 ** i for i in range(4)]:
                raise ConfigError(f"stage widths must double each stage, got {widths}")
            return ArchConfig(base, tuple(c["blocks"]), c.get("activation", "gelu"),
                              float(c.get("r", 0.25)), num_classes,
                              int(c.get("head_width", HEAD_WIDTH)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad custom architecture: {exc}") from exc
    raise ConfigError("architecture JSON needs a 'variant' or 'custom' key")


def block_manifest(width: int, ratio: float, act: str) -> list:
    return [f"PConv_3_{width}_1_{format_ratio(ratio)}", f"Conv_1_{2 * width}_1", "BN",
            ACTIVATIONS[act], f"Conv_1_{width}_1"]


def arch_manifest(cfg: ArchConfig) -> list:
    manifest = []
    for i, (width, depth) in enumerate(zip(cfg.widths, cfg.blocks)):
        manifest += [f"Conv_4_{width}_4" if i == 0 else f"Conv_2_{width}_2", "BN"]
        manifest += [block_manifest(width, cfg.ratio, cfg.activation) for _ in range(depth)]
    manifest += ["GlobalAvgPool", f"Conv_1_{cfg.head_width}_1", ACTIVATIONS[cfg.activation],
                 f"FC_{cfg.num_classes}"]
    return manifest


@dataclass(frozen=True)
class ConvLayer:
    spec: ConvSpec
    weights: ConvWeights

    def __call__(self, x: Tensor) -> Tensor:
        return conv_forward(self.spec, self.weights, x)

    def notation(self) -> str:
        return self.spec.notation()


@dataclass(frozen=True)
class BNLayer:
    params: BNParams

    def __call__(self, x: Tensor) -> Tensor:
        return bn_forward(self.params, x)

    def notation(self) -> str:
        return "BN"


@dataclass(frozen=True)
class ActLayer:
    kind: str

    def __call__(self, x: Tensor) -> Tensor:
        return activation(self.kind, x)

    def notation(self) -> str:
        return ACTIVATIONS[self.kind]


@dataclass(frozen=True)
class PoolLayer:
    def __call__(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)

    def notation(self) -> str:
        return "GlobalAvgPool"


@dataclass(frozen=True)
class FCLayer:
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x: Tensor) -> np.ndarray:
        return fully_connected(self.weight, self.bias, x)

    def notation(self) -> str:
        return f"FC_{self.weight.shape[0]}"


@dataclass(frozen=True)
class Block:
    """Residual block: ``x + layers(x)``."""

    layers: tuple

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for layer in self.layers:
            y = layer(y)
        return residual_add(x, y)


Layer = Union[ConvLayer, BNLayer, ActLayer, PoolLayer, FCLayer]


@dataclass(frozen=True)
class Network:
    entries: tuple
    in_channels: int = 3
    config: Optional[ArchConfig] = None

    def named_layers(self):
        """Yield ``(name, layer)`` with names ``"i"`` or ``"i.j"`` for block members."""
        for i, entry in enumerate(self.entries):
            if isinstance(entry, Block):
                for j, layer in enumerate(entry.layers):
                    yield f"{i}.{j}", layer
            else:
                yield str(i), entry

    @property
    def total_stride(self) -> int:
        s = 1
        for _, layer in self.named_layers():
            if isinstance(layer, ConvLayer):
                s *= layer.spec.stride
        return s

    def stage_ends(self) -> list:
        """Entry indices closing each run of consecutive residual blocks."""
        ends = []
        for i, entry in enumerate(self.entries):
            nxt = self.entries[i + 1] if i + 1 < len(self.entries) else None
            if isinstance(entry, Block) and not isinstance(nxt, Block):
                ends.append(i)
        return ends


def _layer_seed(seed: int, index: int) -> int:
    return int(splitmix64(seed, 1, index)[0])


def _make_layer(text: str, channels: int, seed: int):
    """Build one layer from its notation; returns ``(layer, out_channels)``."""
    if text == "BN":
        return BNLayer(BNParams.neutral(channels)), channels
    if text in ("GELU", "ReLU"):
        return ActLayer(text.lower()), channels
    if text == "GlobalAvgPool":
        return PoolLayer(), channels
    if text.startswith("FC_"):
        out = int(text[3:])
        bound = 1.0 / math.sqrt(channels)
        w = uniform_buffer(seed, out * channels, -bound, bound).reshape(out, channels)
        return FCLayer(w, np.zeros(out, dtype=DTYPE)), out
    spec = parse_notation(text, channels)
    return ConvLayer(spec, init_conv_weights(spec, seed)), spec.out_channels


def build_network(manifest: list, in_channels: int = 3, seed: int = 0,
                  config: Optional[ArchConfig] = None) -> Network:
    """Instantiate a manifest with seeded weights (per-layer seeds derive from ``seed``)."""
    entries = []
    channels = in_channels
    counter = 0
    for entry in manifest:
        if isinstance(entry, str):
            layer, channels = _make_layer(entry, channels, _layer_seed(seed, counter))
            counter += 1
            entries.append(layer)
            continue
        block_in = channels
        layers = []
        for text in entry:
            layer, channels = _make_layer(text, channels, _layer_seed(seed, counter))
            counter += 1
            layers.append(layer)
        if channels != block_in:
            raise SpecError(f"residual block {entry} changes channels {block_in} -> {channels}")
        entries.append(Block(tuple(layers)))
    return Network(tuple(entries), in_channels, config)


def build_variant(name: str, num_classes: int = 1000, seed: int = 0) -> Network:
    cfg = variant_config(name, num_classes)
    return build_network(arch_manifest(cfg), cfg.in_channels, seed, cfg)


def build_config(cfg: ArchConfig, seed: int = 0) -> Network:
    return build_network(arch_manifest(cfg), cfg.in_channels, seed, cfg)


def forward(net: Network, x: Tensor, return_stages: bool = False):
    """Run inference. Returns logits ``(n, classes)`` when the net ends in an FC layer.

    With ``return_stages=True`` also returns the feature map after each stage.
    """
    if x.c != net.in_channels:
        raise ShapeError(f"network expects {net.in_channels} input channels, got {x.c}")
    s = net.total_stride
    if x.h % s or x.w % s:
        raise ShapeError(f"input {x.h}x{x.w} is not divisible by the network stride {s}")
    ends = set(net.stage_ends())
    stages = []
    y = x
    for i, entry in enumerate(net.entries):
        y = entry(y)
        if i in ends:
            stages.append(y)
    return (y, stages) if return_stages else y


def fold_all_bn(net: Network) -> Network:
    """Merge every BN that directly follows a foldable convolution into it."""

    def fold(seq):
        out = []
        for layer in seq:
            if (isinstance(layer, BNLayer) and out and isinstance(out[-1], ConvLayer)
                    and out[-1].spec.kind != "partial"):
                prev = out.pop()
                out.append(ConvLayer(prev.spec, fold_bn_into_conv(prev.spec, prev.weights, layer.params)))
            else:
                out.append(layer)
        return out

    entries = []
    for entry in fold(net.entries):
        entries.append(Block(tuple(fold(entry.layers))) if isinstance(entry, Block) else entry)
    return Network(tuple(entries), net.in_channels, net.config)


def count_bn(net: Network) -> int:
    return sum(isinstance(layer, BNLayer) for _, layer in net.named_layers())


def param_count(net: Network) -> int:
    """Number of learnable values actually stored (BN counts gamma and beta)."""
    total = 0
    for _, layer in net.named_layers():
        if isinstance(layer, ConvLayer):
            total += layer.weights.param_count()
        elif isinstance(layer, BNLayer):
            total += 2 * layer.params.channels
        elif isinstance(layer, FCLayer):
            total += layer.weight.size + layer.bias.size
    return total


def describe(obj) -> list:
    """Manifest of a Network (strings and per-block lists) or of a single Block."""
    if isinstance(obj, Block):
        return [layer.notation() for layer in obj.layers]
    return [describe(e) if isinstance(e, Block) else e.notation() for e in obj.entries]


def randomize_bn(net: Network, seed: int) -> Network:
    """Copy of ``net`` with seeded non-trivial BN statistics (for folding checks)."""
    counter = [0]

    def rnd(seq):
        out = []
        for layer in seq:
            if isinstance(layer, BNLayer):
                c = layer.params.channels
                s = _layer_seed(seed, counter[0])
                counter[0] += 1
                g, b, m, v = uniform_buffer(s, 4 * c).reshape(4, c)
                layer = BNLayer(BNParams(0.5 + g, b - 0.5, 0.2 * (m - 0.5), 0.5 + v, layer.params.eps))
            out.append(layer)
        return out

    entries = [Block(tuple(rnd(e.layers))) if isinstance(e, Block) else rnd([e])[0] for e in net.entries]
    return Network(tuple(entries), net.in_channels, net.config)


def networks_equal(a: Network, b: Network) -> bool:
    """Bitwise structural and weight equality."""
    la, lb = list(a.named_layers()), list(b.named_layers())
    if describe(a) != describe(b) or len(la) != len(lb):
        return False
    for (_, x), (_, y) in zip(la, lb):
        for ax, ay in zip(_arrays(x).values(), _arrays(y).values()):
            if not np.array_equal(ax, ay):
                return False
        if _arrays(x).keys() != _arrays(y).keys():
            return False
    return True


def _arrays(layer) -> dict:
    if isinstance(layer, ConvLayer):
        d = {"weight": layer.weights.filter}
        if layer.weights.bias is not None:
            d["bias"] = layer.weights.bias
        return d
    if isinstance(layer, BNLayer):
        p = layer.params
        return {"gamma": p.gamma, "beta": p.beta, "mean": p.mean, "var": p.var}
    if isinstance(layer, FCLayer):
        return {"weight": layer.weight, "bias": layer.bias}
    return {}


MANIFEST_FORMAT = "pconvlab-weights/1"


def save_weights(net: Network, directory) -> Path:
    """Write ``manifest.json`` plus one PCLT file per parameter array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for name, layer in net.named_layers():
        files = {}
        for key, arr in _arrays(layer).items():
            fname = f"{name}.{key}.pclt"
            save_tensor(directory / fname, arr)
            files[key] = fname
        entry = {"name": name, "layer": layer.notation(), "files": files}
        if isinstance(layer, BNLayer):
            entry["eps"] = layer.params.eps
        layers.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "in_channels": net.in_channels,
        "config": net.config.to_dict() if net.config else None,
        "architecture": describe(net),
        "layers": layers,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_weights(path) -> Network:
    """Inverse of :func:`save_weights`; ``path`` is the manifest or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        arch = manifest["architecture"]
        in_channels = int(manifest["in_channels"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read weight manifest {path}: {exc}") from exc
    cfg = manifest.get("config")
    if cfg:
        cfg = dict(cfg, blocks=tuple(cfg["blocks"]))
        cfg = ArchConfig(**cfg)
    skeleton = build_network(arch, in_channels, 0)
    info = {e["name"]: e for e in manifest["layers"]}
    root = path.parent

    def load(name, layer):
        entry = info.get(name)
        if entry is None or entry["layer"] != layer.notation():
            raise ConfigError(f"weight manifest entry for layer {name} missing or mismatched")
        arrays = {k: load_tensor(root / f) for k, f in entry["files"].items()}
        if isinstance(layer, ConvLayer):
            w = ConvWeights(arrays["weight"], arrays.get("bias"))
            w.check(layer.spec)
            return ConvLayer(layer.spec, w)
        if isinstance(layer, BNLayer):
            return BNLayer(BNParams(arrays["gamma"], arrays["beta"], arrays["mean"], arrays["var"],
                                    float(entry.get("eps", 1e-5))))
        if isinstance(layer, FCLayer):
            return FCLayer(arrays["weight"], arrays["bias"])
        return layer

    entries = []
    for i, e in enumerate(skeleton.entries):
        if isinstance(e, Block):
            entries.append(Block(tuple(load(f"{i}.{j}", l) for j, l in enumerate(e.layers))))
        else:
            entries.append(load(str(i), e))
    return Network(tuple(entries), in_channels, cfg)

"""Analytical FLOPs, memory-access and FLOPS calculators.

FLOPs are multiply-add counts. Memory access is counted in elements (a
float32 feature map or filter element read or written once counts 1; bytes
are 4x that).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import MeasurementError, SpecError
from .operators import ConvSpec, conv_flops_actual, parse_notation

# Kinds whose memory-access formula is an extrapolation rather than a
# published closed form.
EXTRAPOLATED_KINDS = frozenset({"group"})

ELEMENTWISE = ("BN", "GELU", "ReLU")


def mem_access_model(spec: ConvSpec, h: int, w: int, asymptotic: bool = False) -> int:
    """Element accesses of one convolution on an ``h x w`` input.

    Feature-map I/O is input plus output; filters are read once. A partial
    convolution only touches its ``c_p`` channels. With ``asymptotic=True``
    the filter term is dropped, leaving the I/O term alone.
    """
    ho, wo = spec.output_hw(h, w)
    k2 = spec.kernel * spec.kernel
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind == "partial":
        cp = spec.partial_channels
        io, weights = h * w * 2 * cp, k2 * cp * cp
    elif spec.kind == "depthwise":
        io, weights = h * w * cin + ho * wo * cout, k2 * cin
    elif spec.kind == "group":
        io, weights = h * w * cin + ho * wo * cout, k2 * cin * cout // spec.groups
    else:
        io, weights = h * w * cin + ho * wo * cout, k2 * cin * cout
    return io if asymptotic else io + weights


def tshaped_flops(c: int, c_p: int, k: int, h: int, w: int) -> int:
    """FLOPs of a T-shaped conv: full ``k x k`` on ``c_p`` inputs, centre tap on the rest."""
    if not 0 <= c_p <= c:
        raise SpecError(f"need 0 <= c_p <= c, got c_p={c_p}, c={c}")
    return h * w * (k * k * c_p * c + c * (c - c_p))


def pconv_pwconv_flops(c: int, c_p: int, k: int, h: int, w: int) -> int:
    if not 0 <= c_p <= c:
        raise SpecError(f"need 0 <= c_p <= c, got c_p={c_p}, c={c}")
    return h * w * (k * k * c_p * c_p + c * c)


def decomposition_wins(c: int, c_p: int, k: int) -> bool:
    """Condition under which PConv+PWConv is strictly cheaper than the T-shaped conv.

    At ``c_p == 0`` both reduce to the pointwise term and tie.
    """
    return c_p > 0 and (k * k - 1) * c > k * k * c_p


def effective_flops(flops: float, latency_s: float) -> float:
    if not latency_s > 0:
        raise MeasurementError(f"latency must be positive, got {latency_s}")
    return flops / latency_s


def latency_from(flops: float, flops_per_s: float) -> float:
    return flops / flops_per_s


def table_megaflops(count: int) -> str:
    """Render a FLOPs count in millions the way the operator table does.

    Values are truncated, not rounded: two decimals below 100M, whole
    millions above.
    """
    if count >= 100_000_000:
        return str(count // 1_000_000)
    hundredths = count // 10_000
    return f"{hundredths // 100}.{hundredths % 100:02d}"


@dataclass
class LayerCost:
    name: str
    layer: str
    flops: int
    mem_access: int
    params: int
    out_shape: tuple
    extrapolated: bool = False


@dataclass
class CostReport:
    flops: int = 0
    mem_access: int = 0
    params: int = 0
    layers: list = field(default_factory=list)

    @property
    def arithmetic_intensity(self) -> float:
        return self.flops / self.mem_access if self.mem_access else 0.0

    @property
    def out_shape(self):
        return self.layers[-1].out_shape if self.layers else None

    def add(self, entry: LayerCost) -> None:
        self.layers.append(entry)
        self.flops += entry.flops
        self.mem_access += entry.mem_access
        self.params += entry.params

    def __add__(self, other: "CostReport") -> "CostReport":
        out = CostReport()
        for entry in self.layers + other.layers:
            out.add(entry)
        return out

    def to_dict(self, per_layer: bool = True) -> dict:
        d = {
            "flops": self.flops,
            "gflops": self.flops / 1e9,
            "mem_access": self.mem_access,
            "mem_bytes": 4 * self.mem_access,
            "params": self.params,
            "mparams": self.params / 1e6,
            "arithmetic_intensity": self.arithmetic_intensity,
        }
        if per_layer:
            d["layers"] = [dict(asdict(e), out_shape=list(e.out_shape)) for e in self.layers]
        return d


def _layer_cost(text: str, name: str, shape, count_elementwise: bool, asymptotic: bool) -> LayerCost:
    c, h, w = shape
    hw = h * w
    if text == "BN":
        if count_elementwise:
            return LayerCost(name, text, hw * c, 2 * hw * c, 2 * c, shape)
        return LayerCost(name, text, 0, 0, 2 * c, shape)
    if text in ("GELU", "ReLU"):
        if count_elementwise:
            return LayerCost(name, text, hw * c, 2 * hw * c, 0, shape)
        return LayerCost(name, text, 0, 0, 0, shape)
    if text == "GlobalAvgPool":
        flops, mem = (hw * c, hw * c + c) if count_elementwise else (0, 0)
        return LayerCost(name, text, flops, mem, 0, (c, 1, 1))
    if text.startswith("FC_"):
        if h != 1 or w != 1:
            raise SpecError(f"{name}: FC needs a pooled 1x1 input, got {shape}")
        out = int(text[3:])
        return LayerCost(name, text, c * out, c + out + c * out, c * out + out, (out, 1, 1))
    spec = parse_notation(text, c)
    ho, wo = spec.output_hw(h, w)
    return LayerCost(
        name, text,
        conv_flops_actual(spec, ho, wo),
        mem_access_model(spec, h, w, asymptotic),
        conv_params_nominal(spec),
        (spec.out_channels, ho, wo),
        spec.kind in EXTRAPOLATED_KINDS,
    )


def conv_params_nominal(spec: ConvSpec) -> int:
    a, b, k1, k2 = spec.weight_shape()
    return a * b * k1 * k2


def manifest_cost(manifest, in_channels: int, h: int, w: int, *, count_elementwise: bool = False,
                  asymptotic: bool = False, prefix: str = "") -> CostReport:
    """Cost of a layer manifest (see :func:`pconvlab.arch.describe`).

    Entries are layer strings or lists of layer strings; a list is a residual
    block whose output shape must equal its input shape.
    """
    report = CostReport()
    shape = (in_channels, h, w)
    for i, entry in enumerate(manifest):
        name = f"{prefix}{i}"
        if isinstance(entry, str):
            cost = _layer_cost(entry, name, shape, count_elementwise, asymptotic)
            report.add(cost)
            shape = cost.out_shape
            continue
        block_in = shape
        for j, text in enumerate(entry):
            cost = _layer_cost(text, f"{name}.{j}", shape, count_elementwise, asymptotic)
            report.add(cost)
            shape = cost.out_shape
        if shape != block_in:
            raise SpecError(f"block {name} changes shape {block_in} -> {shape}; residual impossible")
        if count_elementwise:
            c, bh, bw = shape
            report.add(LayerCost(f"{name}.add", "Add", c * bh * bw, 3 * c * bh * bw, 0, shape))
    return report


def model_cost(arch, input_h: int = 224, input_w: int = 224, *, count_elementwise: bool = False,
               asymptotic: bool = False) -> CostReport:
    """Cost of a whole network given as an ArchConfig, a Network, or a manifest list."""
    from .arch import ArchConfig, Network, arch_manifest, describe

    if isinstance(arch, ArchConfig):
        manifest, in_c = arch_manifest(arch), arch.in_channels
    elif isinstance(arch, Network):
        manifest, in_c = describe(arch), arch.in_channels
    else:
        manifest, in_c = arch, 3
    return manifest_cost(manifest, in_c, input_h, input_w,
                         count_elementwise=count_elementwise, asymptotic=asymptotic)

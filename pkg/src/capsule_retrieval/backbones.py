"""Feature extraction blocks and full network assembly.

Two backbone families feed the capsule layers:

- ``sc``: plain stacked convolutions, no pooling anywhere; spatial size only
  shrinks through strides.
- ``rc``: a stem convolution followed by residual blocks of two convolutions
  each, with an identity shortcut when shapes match and a 1x1 projection
  (plus batch norm) when channels or stride change.

Every convolution is followed by batch normalization and a leaky rectifier.
A final projection convolution maps backbone features to
``primary_channels * capsule_dim`` channels, which are grouped and squashed
into primary capsules and routed into one capsule per class.

All shape checking happens at build time; ``BuildError`` messages carry the
index of the offending layer.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from capsule_retrieval import capsules as caps
from capsule_retrieval import tensor as T
from capsule_retrieval.tensor import BatchNormState, ShapeError, Tensor

__all__ = [
    "LayerSpec",
    "BackboneConfig",
    "NetworkConfig",
    "BuildError",
    "Network",
    "build_network",
    "count_params",
]


class BuildError(ValueError):
    """A network configuration is structurally invalid."""


@dataclass
class LayerSpec:
    """One convolution (sc) or one residual block (rc, after the stem)."""

    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def validate(self, index: int) -> None:
        if self.filters < 1 or self.kernel < 1 or self.stride < 1:
            raise BuildError(
                f"layer {index}: filters/kernel/stride must be positive, got {self}"
            )
        if self.padding < 0:
            raise BuildError(f"layer {index}: padding must be non-negative, got {self}")


@dataclass
class BackboneConfig:
    """Feature block description.

    For kind ``"sc"`` every entry of ``layers`` is one convolution.  For kind
    ``"rc"`` the first entry is the stem convolution and each later entry
    describes a residual block (two convolutions of ``filters`` channels; the
    block's first convolution uses the given stride).  ``insert_projections``
    controls whether mismatched residual joins get a 1x1 projection shortcut;
    with it off, such a join is a build error.
    """

    kind: str
    layers: list[LayerSpec]
    input_resolution: tuple[int, int]
    input_channels: int = 3
    leaky_slope: float = 0.01
    insert_projections: bool = True

    def validate(self) -> None:
        if self.kind not in ("sc", "rc"):
            raise BuildError(f"unknown backbone kind {self.kind!r} (expected 'sc' or 'rc')")
        if not self.layers:
            raise BuildError("backbone needs at least one layer")
        if self.kind == "rc" and len(self.layers) < 2:
            raise BuildError("rc backbone needs a stem layer plus at least one block")
        if not 0.0 < self.leaky_slope < 1.0:
            raise BuildError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if len(self.input_resolution) != 2 or min(self.input_resolution) < 1:
            raise BuildError(f"bad input resolution {self.input_resolution}")
        if self.input_channels < 1:
            raise BuildError(f"bad input channel count {self.input_channels}")
        for i, spec in enumerate(self.layers):
            spec.validate(i)


@dataclass
class NetworkConfig:
    """Full network description: backbone, capsule projection, class capsules."""

    backbone: BackboneConfig
    num_classes: int
    primary_channels: int = 32
    capsule_dim: int = 16
    routing_iterations: int = 3
    primary_kernel: int = 3
    primary_stride: int = 2
    primary_padding: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        if self.num_classes < 1:
            raise BuildError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.routing_iterations < 1:
            raise BuildError(
                f"routing_iterations must be >= 1, got {self.routing_iterations}"
            )
        if self.primary_channels < 1 or self.capsule_dim < 1:
            raise BuildError("primary_channels and capsule_dim must be positive")
        if self.primary_kernel < 1 or self.primary_stride < 1 or self.primary_padding < 0:
            raise BuildError("bad primary projection convolution parameters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["input_resolution"] = list(self.backbone.input_resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        b = dict(d["backbone"])
        b["layers"] = [LayerSpec(**ls) for ls in b["layers"]]
        b["input_resolution"] = tuple(b["input_resolution"])
        fields = {k: v for k, v in d.items() if k != "backbone"}
        return cls(backbone=BackboneConfig(**b), **fields)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _he_init(rng: np.random.Generator, out_ch: int, in_ch: int, kernel: int) -> np.ndarray:
    std = np.sqrt(2.0 / (in_ch * kernel * kernel))
    return rng.normal(scale=std, size=(out_ch, in_ch, kernel, kernel))


class Conv2d:
    def __init__(self, name, in_ch, out_ch, kernel, stride, padding, rng):
        self.name = name
        self.stride = stride
        self.padding = padding
        dt = T.default_dtype()
        self.weight = Tensor(_he_init(rng, out_ch, in_ch, kernel).astype(dt), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dt), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class BatchNorm2d:
    def __init__(self, name, channels, momentum=0.9, eps=1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        dt = T.default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.state = BatchNormState.initial(channels, dtype=dt)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.state, training, self.momentum, self.eps
        )

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.state.mean,
            f"{self.name}.running_var": self.state.var,
        }


class ConvUnit:
    """conv -> batch_norm -> leaky_relu."""

    def __init__(self, name, in_ch, spec: LayerSpec, slope, rng):
        self.conv = Conv2d(
            f"{name}.conv", in_ch, spec.filters, spec.kernel, spec.stride, spec.padding, rng
        )
        self.bn = BatchNorm2d(f"{name}.bn", spec.filters)
        self.slope = slope

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return T.leaky_relu(self.bn.forward(self.conv.forward(x), training), self.slope)

    def parameters(self):
        return {**self.conv.parameters(), **self.bn.parameters()}

    def buffers(self):
        return self.bn.buffers()


class ResidualBlock:
    """Two convolutions with a shortcut joined before the final activation."""

    def __init__(self, name, in_ch, spec: LayerSpec, slope, rng, projection: bool):
        self.slope = slope
        self.conv1 = Conv2d(
            f"{name}.conv1", in_ch, spec.filters, spec.kernel, spec.stride, spec.padding, rng
        )
        self.bn1 = BatchNorm2d(f"{name}.bn1", spec.filters)
        self.conv2 = Conv2d(
            f"{name}.conv2", spec.filters, spec.filters, spec.kernel, 1, spec.padding, rng
        )
        self.bn2 = BatchNorm2d(f"{name}.bn2", spec.filters)
        if projection:
            self.proj = Conv2d(f"{name}.proj", in_ch, spec.filters, 1, spec.stride, 0, rng)
            self.proj_bn = BatchNorm2d(f"{name}.proj_bn", spec.filters)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        branch = T.leaky_relu(self.bn1.forward(self.conv1.forward(x), training), self.slope)
        branch = self.bn2.forward(self.conv2.forward(branch), training)
        if self.proj is not None:
            shortcut = self.proj_bn.forward(self.proj.forward(x), training)
        else:
            shortcut = x
        return T.leaky_relu(T.elementwise_add(branch, shortcut), self.slope)

    def parameters(self):
        out = {**self.conv1.parameters(), **self.bn1.parameters()}
        out.update(self.conv2.parameters())
        out.update(self.bn2.parameters())
        if self.proj is not None:
            out.update(self.proj.parameters())
            out.update(self.proj_bn.parameters())
        return out

    def buffers(self):
        out = {**self.bn1.buffers(), **self.bn2.buffers()}
        if self.proj_bn is not None:
            out.update(self.proj_bn.buffers())
        return out


class Network:
    """Backbone -> primary capsules -> routed class capsules.

    Instances are built through ``build_network``; forward in eval mode is a
    pure function of the weights, while train mode also advances the batch
    norm running statistics (so a single instance must not run train-mode
    forwards concurrently).
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        slope = cfg.backbone.leaky_slope
        c, h, w = cfg.backbone.input_channels, *cfg.backbone.input_resolution
        self.units: list = []
        self._table: list[dict] = []

        def check_conv(index, label, hh, ww, spec_like):
            kernel, stride, padding = spec_like
            if hh + 2 * padding < kernel or ww + 2 * padding < kernel:
                raise BuildError(
                    f"layer {index} ({label}): kernel {kernel} exceeds padded input "
                    f"{hh + 2 * padding}x{ww + 2 * padding}"
                )
            nh = _conv_out(hh, kernel, stride, padding)
            nw = _conv_out(ww, kernel, stride, padding)
            if nh < 1 or nw < 1:
                raise BuildError(f"layer {index} ({label}): output collapses to zero size")
            return nh, nw

        if cfg.backbone.kind == "sc":
            for i, spec in enumerate(cfg.backbone.layers):
                nh, nw = check_conv(i, "conv", h, w, (spec.kernel, spec.stride, spec.padding))
                unit = ConvUnit(f"backbone.{i}", c, spec, slope, rng)
                self.units.append(unit)
                self._record_conv_unit(i, spec, c, nh, nw)
                c, h, w = spec.filters, nh, nw
        else:
            stem = cfg.backbone.layers[0]
            nh, nw = check_conv(0, "stem", h, w, (stem.kernel, stem.stride, stem.padding))
            unit = ConvUnit("backbone.stem", c, stem, slope, rng)
            self.units.append(unit)
            self._record_conv_unit(0, stem, c, nh, nw)
            c, h, w = stem.filters, nh, nw
            for bi, spec in enumerate(cfg.backbone.layers[1:], start=1):
                bh, bw = check_conv(
                    bi, "block conv1", h, w, (spec.kernel, spec.stride, spec.padding)
                )
                bh, bw = check_conv(bi, "block conv2", bh, bw, (spec.kernel, 1, spec.padding))
                shortcut_matches = spec.filters == c and (bh, bw) == (h, w)
                needs_proj = not shortcut_matches
                if needs_proj:
                    if not cfg.backbone.insert_projections:
                        raise BuildError(
                            f"layer {bi}: residual join needs shapes to agree but the "
                            f"shortcut carries {c}x{h}x{w} while the branch produces "
                            f"{spec.filters}x{bh}x{bw} and projections are disabled"
                        )
                    ph = _conv_out(h, 1, spec.stride, 0)
                    pw = _conv_out(w, 1, spec.stride, 0)
                    if (ph, pw) != (bh, bw):
                        raise BuildError(
                            f"layer {bi}: a 1x1 stride-{spec.stride} projection yields "
                            f"{ph}x{pw}, not the branch's {bh}x{bw}; adjust kernel/padding"
                        )
                block = ResidualBlock(f"backbone.block{bi}", c, spec, slope, rng, needs_proj)
                self.units.append(block)
                self._record_block(bi, spec, c, bh, bw, needs_proj)
                c, h, w = spec.filters, bh, bw

        proj_out = cfg.primary_channels * cfg.capsule_dim
        idx = len(cfg.backbone.layers)
        nh, nw = check_conv(
            idx, "primary projection", h, w,
            (cfg.primary_kernel, cfg.primary_stride, cfg.primary_padding),
        )
        self.projection = Conv2d(
            "primary.proj", c, proj_out, cfg.primary_kernel, cfg.primary_stride,
            cfg.primary_padding, rng,
        )
        self._table.append(
            {
                "layer": "primary.proj",
                "kind": "conv",
                "detail": f"{c}->{proj_out} k{cfg.primary_kernel} s{cfg.primary_stride} "
                f"p{cfg.primary_padding}",
                "output": f"{proj_out}x{nh}x{nw}",
                "params": proj_out * c * cfg.primary_kernel**2 + proj_out,
            }
        )
        self.primary_grid = (nh, nw)
        self.in_caps = cfg.primary_channels * nh * nw
        self._table.append(
            {
                "layer": "primary.capsules",
                "kind": "primary_capsules",
                "detail": f"{cfg.primary_channels} channels of {cfg.capsule_dim}-d capsules",
                "output": f"{self.in_caps}x{cfg.capsule_dim}",
                "params": 0,
            }
        )
        self.class_caps = caps.ClassCapsuleParams.initialize(
            self.in_caps, cfg.num_classes, cfg.capsule_dim, cfg.capsule_dim, rng
        )
        self._table.append(
            {
                "layer": "class.capsules",
                "kind": "class_capsules",
                "detail": f"routing x{cfg.routing_iterations}",
                "output": f"{cfg.num_classes}x{cfg.capsule_dim}",
                "params": self.class_caps.weight.size,
            }
        )

    def _record_conv_unit(self, i, spec, in_ch, nh, nw):
        conv_params = spec.filters * in_ch * spec.kernel**2 + spec.filters
        self._table.append(
            {
                "layer": f"backbone.{i}",
                "kind": "conv+bn+leaky_relu",
                "detail": f"{in_ch}->{spec.filters} k{spec.kernel} s{spec.stride} p{spec.padding}",
                "output": f"{spec.filters}x{nh}x{nw}",
                "params": conv_params + 2 * spec.filters,
            }
        )

    def _record_block(self, bi, spec, in_ch, nh, nw, has_proj):
        p = spec.filters * in_ch * spec.kernel**2 + spec.filters
        p += spec.filters * spec.filters * spec.kernel**2 + spec.filters
        p += 4 * spec.filters
        if has_proj:
            p += spec.filters * in_ch + spec.filters + 2 * spec.filters
        self._table.append(
            {
                "layer": f"backbone.block{bi}",
                "kind": "residual_block",
                "detail": f"{in_ch}->{spec.filters} k{spec.kernel} s{spec.stride}"
                + (" +proj" if has_proj else ""),
                "output": f"{spec.filters}x{nh}x{nw}",
                "params": p,
            }
        )

    # -- forward ------------------------------------------------------------

    def forward(self, images: Tensor, training: bool = False) -> caps.CapsuleTensor:
        """Map an image batch [N, C, H, W] to class capsules [N, classes, dim]."""
        expect = (self.cfg.backbone.input_channels, *self.cfg.backbone.input_resolution)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise ShapeError(
                f"network expects input [N, {expect[0]}, {expect[1]}, {expect[2]}], "
                f"got {images.shape}"
            )
        x = images
        for unit in self.units:
            x = unit.forward(x, training)
        feats = self.projection.forward(x)
        primary = caps.primary_capsules(
            feats, self.cfg.primary_channels, self.cfg.capsule_dim
        )
        votes = caps.compute_votes(primary, self.class_caps)
        return caps.dynamic_routing(votes, self.cfg.routing_iterations)

    def embed_images(self, images: Tensor, labels=None, training: bool = False) -> Tensor:
        """Forward plus masked embedding; argmax masking when labels is None."""
        return caps.embed(self.forward(images, training), labels)

    # -- introspection --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for unit in self.units:
            out.update(unit.parameters())
        out.update(self.projection.parameters())
        out["class.capsules.weight"] = self.class_caps.weight
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for unit in self.units:
            out.update(unit.buffers())
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def describe(self) -> list[dict]:
        """Layer table: one row per stage with output shape and parameter count."""
        return [dict(row) for row in self._table]


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    """Construct and shape-check a network; weights are seeded deterministically."""
    return Network(cfg, seed)


def count_params(net: Network) -> int:
    """Exact number of trainable scalars."""
    return sum(p.size for p in net.named_parameters().values())

"""Multi-scale detector graph: backbone, feature pyramid neck, heads.

One declarative layer plan drives three interpreters: parameter creation,
the forward pass, and the analytic FLOP counter, so they cannot drift
apart.  The number of active scales (3, 4 or 5) is gated by input image
height; variants share parameter names for all common layers, so a
5-scale checkpoint serves every variant.  When the deepest scale of the
full pyramid is dropped, the concatenation it would have fed is replaced
by channel tiling, keeping every downstream shape unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError

LEAKY_SLOPE = 0.1
MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class ScalePolicy:
    """Image-height thresholds that gate the active scale count."""

    h4: int = 810
    h5: int = 1620

    def __post_init__(self):
        if not 0 < self.h4 < self.h5:
            raise ValidationError(f"scale policy needs 0 < h4 < h5, got h4={self.h4}, h5={self.h5}")


def select_num_scales(image_height: int, policy: ScalePolicy) -> int:
    """3 below h4, 4 on [h4, h5], 5 above h5; monotone in height."""
    if image_height < MIN_IMAGE_SIDE:
        raise ValidationError(f"image height {image_height} is below the minimum of {MIN_IMAGE_SIDE}")
    if image_height < policy.h4:
        return 3
    if image_height <= policy.h5:
        return 4
    return 5


def default_anchor_sets(num_scales: int, anchors_per_scale: int = 3) -> tuple:
    """Geometric (w, h) ladder used before autoanchor runs."""
    sets = []
    for s in range(1, num_scales + 1):
        stride = 2 ** (s + 2)
        heights = [stride * f for f in (2.5, 4.0, 6.0)][:anchors_per_scale]
        while len(heights) < anchors_per_scale:
            heights.append(heights[-1] * 1.3)
        sets.append(tuple((0.45 * h, h) for h in heights))
    return tuple(sets)


@dataclass
class ArchitectureSpec:
    """Declarative description of the detector graph."""

    num_scales: int = 5
    stage_channels: tuple = (16, 32, 64, 128, 256)
    anchors_per_scale: int = 3
    anchor_sets: tuple = None
    num_classes: int = 2

    def __post_init__(self):
        if self.anchor_sets is None:
            self.anchor_sets = default_anchor_sets(self.num_scales, self.anchors_per_scale)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.num_scales not in (3, 4, 5):
            problems.append(f"num_scales must be 3, 4 or 5, got {self.num_scales}")
        if len(self.stage_channels) < self.num_scales:
            problems.append(
                f"stage_channels has {len(self.stage_channels)} entries for {self.num_scales} scales"
            )
        widths = self.stage_channels[: self.num_scales]
        if any(b <= a for a, b in zip(widths, widths[1:])):
            problems.append(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if any(c < 4 or c % 2 for c in widths):
            problems.append(f"stage_channels must be even and >= 4, got {self.stage_channels}")
        if self.anchors_per_scale < 1:
            problems.append(f"anchors_per_scale must be positive, got {self.anchors_per_scale}")
        if self.num_classes < 1:
            problems.append(f"num_classes must be positive, got {self.num_classes}")
        if len(self.anchor_sets) != self.num_scales:
            problems.append(
                f"anchor_sets holds {len(self.anchor_sets)} scales, expected {self.num_scales}"
            )
        else:
            for s, anchors in enumerate(self.anchor_sets, start=1):
                if len(anchors) != self.anchors_per_scale:
                    problems.append(f"scale {s} has {len(anchors)} anchors, expected {self.anchors_per_scale}")
                if any(w <= 0 or h <= 0 for w, h in anchors):
                    problems.append(f"scale {s} has non-positive anchor dimensions")
        if problems:
            raise ValidationError("invalid architecture spec: " + "; ".join(problems))

    @property
    def head_channels(self) -> int:
        return self.anchors_per_scale * (5 + self.num_classes)


def stride_for_scale(scale_index: int) -> int:
    return 2 ** (scale_index + 2)


@dataclass
class DetectionGrid:
    """Raw head output for one scale plus the geometry needed to decode it.

    Channel layout per anchor slot: (tx, ty, tw, th, objectness, class...).
    """

    scale_index: int
    stride: int
    raw: T.Tensor
    image_height: int
    image_width: int


@dataclass(frozen=True)
class _Node:
    name: str
    kind: str  # conv | upsample | concat | tile | s2d
    srcs: tuple
    cin: int = 0
    cout: int = 0
    k: int = 0
    stride: int = 1
    pad: int = 0
    act: bool = True
    repeat: int = 1


def build_plan(spec: ArchitectureSpec, num_scales: int) -> tuple[list[_Node], list[str]]:
    """Layer plan for a variant; returns (nodes, head node names)."""
    if num_scales > spec.num_scales:
        raise ValidationError(
            f"requested {num_scales} scales but the spec was built with {spec.num_scales}"
        )
    stages = spec.stage_channels
    nodes: list[_Node] = []

    def conv(name, src, cin, cout, k, stride=1, act=True):
        nodes.append(_Node(name, "conv", (src,), cin, cout, k, stride, k // 2, act))
        return name, cout

    # Stem: fold 4x4 tiles into channels, then a pointwise mix.  Same
    # receptive field as a stride-4 conv but the column build is free.
    nodes.append(_Node("s2d", "s2d", ("input",), cin=3, cout=48, repeat=4))
    prev, c = conv("stem", "s2d", 48, stages[0], 1)
    backbone = {}
    for i in range(num_scales):
        prev, c = conv(f"down{i + 1}", prev, c, stages[i], 3, 2)
        backbone[i + 1] = (prev, c)

    lateral = [stages[i] // 2 for i in range(num_scales)]
    deepest = num_scales
    if deepest == 5:
        width = stages[3] // 2
        p, c = conv("lat5", backbone[5][0], backbone[5][1], width, 1)
        p, c = conv("smooth5", p, c, width, 3)
    else:
        width = lateral[deepest - 1]
        p, c = conv(f"lat{deepest}", backbone[deepest][0], backbone[deepest][1], width, 1)
        nodes.append(_Node(f"tile{deepest}", "tile", (p,), cin=c, cout=2 * c, repeat=2))
        p, c = conv(f"smooth{deepest}", f"tile{deepest}", 2 * c, 2 * c, 3)
    pyramid = {deepest: (p, c)}
    for s in range(deepest - 1, 0, -1):
        lat_w = lateral[s - 1]
        r, rc = conv(f"red{s + 1}", pyramid[s + 1][0], pyramid[s + 1][1], lat_w, 1)
        nodes.append(_Node(f"up{s + 1}", "upsample", (r,), cin=rc, cout=rc))
        l, lc = conv(f"lat{s}", backbone[s][0], backbone[s][1], lat_w, 1)
        nodes.append(_Node(f"cat{s}", "concat", (l, f"up{s + 1}"), cin=lc + rc, cout=lc + rc))
        p, c = conv(f"smooth{s}", f"cat{s}", lc + rc, 2 * lat_w, 3)
        pyramid[s] = (p, c)

    heads = []
    for s in range(1, deepest + 1):
        name, width = pyramid[s]
        h, _ = conv(f"head{s}", name, width, spec.head_channels, 1, act=False)
        heads.append(h)
    return nodes, heads


def conv_layer_flops(k: int, cin: int, cout: int, out_h: int, out_w: int) -> int:
    """FLOPs of one conv layer at 2 per multiply-add (bias not counted)."""
    return 2 * k * k * cin * cout * out_h * out_w


def padded_size(h: int, w: int, num_scales: int) -> tuple[int, int]:
    stride = stride_for_scale(num_scales)
    return -(-h // stride) * stride, -(-w // stride) * stride


def layer_table(
    spec: ArchitectureSpec, image_height: int, image_width: int, num_scales: int | None = None
) -> list[dict]:
    """Per-conv-layer shapes and FLOPs for the graph a forward pass runs."""
    ns = num_scales or spec.num_scales
    nodes, _ = build_plan(spec, ns)
    ph, pw = padded_size(image_height, image_width, ns)
    dims = {"input": (ph, pw)}
    rows = []
    for node in nodes:
        if node.kind == "conv":
            h, w = dims[node.srcs[0]]
            oh = (h + 2 * node.pad - node.k) // node.stride + 1
            ow = (w + 2 * node.pad - node.k) // node.stride + 1
            dims[node.name] = (oh, ow)
            rows.append(
                {
                    "name": node.name,
                    "cin": node.cin,
                    "cout": node.cout,
                    "k": node.k,
                    "stride": node.stride,
                    "out_h": oh,
                    "out_w": ow,
                    "flops": conv_layer_flops(node.k, node.cin, node.cout, oh, ow),
                }
            )
        elif node.kind == "upsample":
            h, w = dims[node.srcs[0]]
            dims[node.name] = (2 * h, 2 * w)
        elif node.kind == "s2d":
            h, w = dims[node.srcs[0]]
            dims[node.name] = (h // node.repeat, w // node.repeat)
        else:
            dims[node.name] = dims[node.srcs[0]]
    return rows


def count_flops(
    spec: ArchitectureSpec, image_height: int, image_width: int, num_scales: int | None = None
) -> int:
    """Analytic conv FLOPs (2 per multiply-add) of one forward pass."""
    return sum(row["flops"] for row in layer_table(spec, image_height, image_width, num_scales))


class Model:
    """Built detector: named parameters plus per-variant layer plans."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.anchor_sets = tuple(tuple(map(tuple, s)) for s in spec.anchor_sets)
        self._plans = {ns: build_plan(spec, ns) for ns in (3, 4, 5) if ns <= spec.num_scales}
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(seed)
        nodes, _ = self._plans[spec.num_scales]
        for node in nodes:
            if node.kind != "conv":
                continue
            fan_in = node.cin * node.k * node.k
            std = float(np.sqrt(2.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in)))
            if node.name.startswith("head"):
                std *= 0.1
            weight = rng.normal(0.0, std, size=(node.cout, node.cin, node.k, node.k))
            bias = np.zeros(node.cout)
            if node.name.startswith("head"):
                block = 5 + spec.num_classes
                for a in range(spec.anchors_per_scale):
                    bias[a * block + 4] = -4.0  # objectness prior: mostly background
            self.params[f"{node.name}.weight"] = T.Tensor(weight.astype(np.float32), requires_grad=True)
            self.params[f"{node.name}.bias"] = T.Tensor(bias.astype(np.float32), requires_grad=True)

    # -- persistence ---------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for s, anchors in enumerate(self.anchor_sets, start=1):
            out[f"anchors.scale{s}"] = np.asarray(anchors, dtype=np.float32)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = [name for name in self.params if name not in state]
        if missing:
            raise ValidationError(f"checkpoint is missing parameters: {', '.join(sorted(missing))}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"checkpoint entry {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.copy()
            p.grad = None
        anchors = []
        for s in range(1, self.spec.num_scales + 1):
            key = f"anchors.scale{s}"
            if key not in state:
                anchors = None
                break
            anchors.append(tuple(map(tuple, np.asarray(state[key], dtype=np.float64))))
        if anchors:
            self.anchor_sets = tuple(anchors)
            self.spec.anchor_sets = self.anchor_sets

    def save(self, path) -> None:
        T.save_weights(path, {k: v for k, v in self.state().items()})

    def load(self, path) -> None:
        self.load_state(T.load_weights(path))

    def trainable(self) -> list[T.Tensor]:
        return list(self.params.values())

    # -- execution -----------------------------------------------------
    def active_scales(self, image_height: int, policy: ScalePolicy | None) -> int:
        ns = select_num_scales(image_height, policy or ScalePolicy())
        return min(ns, self.spec.num_scales)

    def forward(
        self,
        image: np.ndarray,
        num_scales: int | None = None,
        policy: ScalePolicy | None = None,
        capture: dict | None = None,
    ) -> list[DetectionGrid]:
        """Run the graph on one [3,H,W] image in [0,1]; returns head grids.

        With ``num_scales=None`` the scale count is selected from the
        image height (resolution-adaptive mode); passing it runs a fixed
        variant.  The image is padded bottom-right to the largest active
        stride with reflection padding.
        """
        img = np.asarray(image)
        if img.ndim == 4:
            if img.shape[0] != 1:
                raise ShapeError(f"batch size must be 1, got input shape {img.shape}")
            img = img[0]
        if img.ndim != 3 or img.shape[0] != 3:
            raise ShapeError(f"expected [3,H,W] image, got shape {img.shape}")
        h, w = img.shape[1], img.shape[2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise ValidationError(f"image {w}x{h} is smaller than the {MIN_IMAGE_SIDE}px minimum")
        lo, hi = float(img.min()), float(img.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"image values must lie in [0,1], got range [{lo}, {hi}]")
        ns = num_scales if num_scales is not None else self.active_scales(h, policy)
        if ns not in self._plans:
            raise ValidationError(f"model built with {self.spec.num_scales} scales cannot run {ns}")
        ph, pw = padded_size(h, w, ns)
        dtype = next(iter(self.params.values())).data.dtype
        img = img.astype(dtype, copy=False)
        if ph != h or pw != w:
            img = np.pad(img, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect")
        values: dict[str, T.Tensor] = {"input": T.Tensor(img[None, :, :, :])}

        nodes, heads = self._plans[ns]
        for node in nodes:
            if node.kind == "conv":
                out = T.conv2d(
                    values[node.srcs[0]],
                    self.params[f"{node.name}.weight"],
                    self.params[f"{node.name}.bias"],
                    stride=node.stride,
                    padding=node.pad,
                )
                if node.act:
                    out = T.leaky_relu(out, LEAKY_SLOPE)
            elif node.kind == "upsample":
                out = T.upsample_nearest2x(values[node.srcs[0]])
            elif node.kind == "concat":
                out = T.concat_channels(values[node.srcs[0]], values[node.srcs[1]])
            elif node.kind == "s2d":
                out = T.space_to_depth(values[node.srcs[0]], node.repeat)
            else:
                out = T.tile_channels(values[node.srcs[0]], node.repeat)
            values[node.name] = out
            if capture is not None:
                capture[node.name] = out

        grids = []
        for s, head in enumerate(heads, start=1):
            grids.append(
                DetectionGrid(
                    scale_index=s,
                    stride=stride_for_scale(s),
                    raw=values[head],
                    image_height=h,
                    image_width=w,
                )
            )
        return grids


def build(spec: ArchitectureSpec, seed: int = 0) -> Model:
    """Construct a model with freshly initialised weights."""
    return Model(spec, seed=seed)


def forward(model: Model, image: np.ndarray, policy: ScalePolicy) -> list[DetectionGrid]:
    """Resolution-adaptive forward: scale count gated by image height."""
    return model.forward(image, policy=policy)

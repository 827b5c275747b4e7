"""Miniature VGG-style and residual classifiers with named segment control.

Both families split into six contiguous segments m_0..m_4, m_fc at their
down-sampling boundaries (max-pooling for the VGG family, stride-2 blocks for
the residual family); m_fc is the pooling + classifier head. Segments drive
selective reinitialization and freezing.

Parameter initialization is He-normal, derived per layer from
(seed, "init", layer_path), so reinitializing every segment with seed s is
bit-identical to a fresh build with seed s.
"""

from __future__ import annotations

import copy as _copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .rng import derive_rng
from .tensor import Tensor


class Conv2d:
    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = Tensor(np.zeros((out_ch, in_ch, kernel, kernel)), requires_grad=True)

    def init_params(self, rng: np.random.Generator) -> None:
        fan_in = self.in_ch * self.kernel * self.kernel
        self.weight.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.weight.data.shape)

    def forward(self, x, train):
        return ops.conv2d(x, self.weight, bias=None, stride=self.stride, padding=self.padding)

    def params(self):
        return [("weight", self.weight)]

    def state(self):
        return [("weight", self.weight.data)]


class BatchNorm2d:
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        # Set by FreezeMask.apply_to: a frozen batchnorm normalizes with its
        # stored running stats in every mode and never updates them, so the
        # frozen segment computes a truly fixed function.
        self.stats_frozen = False

    def init_params(self, rng: np.random.Generator) -> None:
        self.gamma.data = np.ones(self.channels)
        self.beta.data = np.zeros(self.channels)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)

    def forward(self, x, train):
        use_train = train and not self.stats_frozen
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            train=use_train, momentum=self.momentum, eps=self.eps,
            update_stats=not self.stats_frozen,
        )

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [
            ("gamma", self.gamma.data),
            ("beta", self.beta.data),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]


class ReLU:
    kind = "relu"

    def init_params(self, rng):
        pass

    def forward(self, x, train):
        return ops.relu(x)

    def params(self):
        return []

    def state(self):
        return []


class MaxPool2d:
    kind = "maxpool"

    def __init__(self, window: int = 2):
        self.window = window

    def init_params(self, rng):
        pass

    def forward(self, x, train):
        return ops.maxpool2d(x, self.window)

    def params(self):
        return []

    def state(self):
        return []


class GlobalAvgPool:
    kind = "gap"

    def init_params(self, rng):
        pass

    def forward(self, x, train):
        return ops.global_avg_pool(x)

    def params(self):
        return []

    def state(self):
        return []


class Linear:
    kind = "linear"

    def __init__(self, in_features: int, out_features: int):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def init_params(self, rng: np.random.Generator) -> None:
        self.weight.data = rng.normal(0.0, np.sqrt(2.0 / self.in_features), self.weight.data.shape)
        self.bias.data = np.zeros(self.out_features)

    def forward(self, x, train):
        return ops.linear(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def state(self):
        return [("weight", self.weight.data), ("bias", self.bias.data)]


class BasicBlock:
    """Residual block: conv-bn-relu-conv-bn plus (projected) shortcut, relu."""

    kind = "basic_block"

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, 1, stride, 0)
            self.down_bn = BatchNorm2d(out_ch)
        else:
            self.down_conv = None
            self.down_bn = None

    def init_params(self, rng):
        raise NotImplementedError("initialize BasicBlock through its sublayers")

    def forward(self, x, train):
        h = ops.relu(self.bn1.forward(self.conv1.forward(x, train), train))
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        if self.down_conv is not None:
            shortcut = self.down_bn.forward(self.down_conv.forward(x, train), train)
        else:
            shortcut = x
        return ops.relu(ops.residual_add(h, shortcut))

    def sublayers(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.down_conv is not None:
            out += [("down_conv", self.down_conv), ("down_bn", self.down_bn)]
        return out

    def params(self):
        out = []
        for sub_name, sub in self.sublayers():
            out += [(f"{sub_name}.{p}", t) for p, t in sub.params()]
        return out

    def state(self):
        out = []
        for sub_name, sub in self.sublayers():
            out += [(f"{sub_name}.{p}", a) for p, a in sub.state()]
        return out


@dataclass
class Segment:
    """Contiguous span [start, end) of top-level layer indices."""

    name: str
    start: int
    end: int


@dataclass
class ModuleSegmentation:
    segments: list[Segment]

    def validate(self, n_layers: int) -> None:
        if not self.segments:
            raise ValueError("segmentation must contain at least one segment")
        pos = 0
        for seg in self.segments:
            if seg.start != pos or seg.end <= seg.start:
                raise ValueError(
                    f"segments must partition the layer list exactly; "
                    f"segment {seg.name} spans [{seg.start}, {seg.end}) at position {pos}"
                )
            pos = seg.end
        if pos != n_layers:
            raise ValueError(f"segments cover {pos} layers but the graph has {n_layers}")
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names: {names}")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def span(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"unknown segment {name!r}; valid segments: {self.names}")

    def check_names(self, names) -> None:
        unknown = [n for n in names if n not in self.names]
        if unknown:
            raise KeyError(f"unknown segment(s) {unknown}; valid segments: {self.names}")


class ModelGraph:
    """Ordered layer list plus its segmentation; shapes validated at build."""

    def __init__(self, named_layers, segmentation: ModuleSegmentation, input_shape,
                 num_classes: int, arch_descriptor: str):
        self.layer_names = [name for name, _ in named_layers]
        if len(set(self.layer_names)) != len(self.layer_names):
            raise ValueError("layer names must be unique")
        self.layers = [layer for _, layer in named_layers]
        self.segmentation = segmentation
        segmentation.validate(len(self.layers))
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch_descriptor = arch_descriptor
        self._validate_shapes()

    def _validate_shapes(self) -> None:
        x = Tensor(np.zeros((2, *self.input_shape)))
        out = self.forward(x, train=False)
        if out.data.shape != (2, self.num_classes):
            raise ValueError(
                f"graph output shape {out.data.shape} does not match {self.num_classes} classes"
            )

    def forward(self, x, train: bool = False, taps=None):
        """Run the graph; with ``taps`` also return segment-output tensors.

        ``taps`` is an iterable of segment names; the second return value maps
        each to the output of that segment's last layer.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        tapped = {} if taps is not None else None
        if taps is not None:
            self.segmentation.check_names(taps)
            tap_at = {self.segmentation.span(name).end - 1: name for name in taps}
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, train)
            if taps is not None and i in tap_at:
                tapped[tap_at[i]] = h
        if taps is not None:
            return h, tapped
        return h

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode class predictions for a plain image batch."""
        return np.argmax(self.forward(Tensor(images), train=False).data, axis=1)

    # Layer/parameter enumeration. "Flat" recurses through composite blocks in
    # execution order; paths look like "stage1_block0.conv1".
    def flat_layers(self):
        out = []
        for name, layer in zip(self.layer_names, self.layers):
            if hasattr(layer, "sublayers"):
                out += [(f"{name}.{s}", sub) for s, sub in layer.sublayers()]
            else:
                out.append((name, layer))
        return out

    def param_layers(self):
        return [(path, layer) for path, layer in self.flat_layers() if layer.params()]

    def parameters(self):
        out = []
        for path, layer in self.flat_layers():
            out += [(f"{path}.{p}", t) for p, t in layer.params()]
        return out

    def state_items(self):
        """Ordered (key, array) pairs: parameters plus batchnorm running stats."""
        out = []
        for path, layer in self.flat_layers():
            out += [(f"{path}.{p}", a) for p, a in layer.state()]
        return out

    def load_state(self, arrays: dict) -> None:
        keys = [k for k, _ in self.state_items()]
        missing = [k for k in keys if k not in arrays]
        extra = [k for k in arrays if k not in keys]
        if missing or extra:
            raise ValueError(f"state mismatch; missing {missing}, unexpected {extra}")
        for path, layer in self.flat_layers():
            for p, t in layer.params():
                t.data = np.array(arrays[f"{path}.{p}"], dtype=np.float64)
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = np.array(arrays[f"{path}.running_mean"], dtype=np.float64)
                layer.running_var = np.array(arrays[f"{path}.running_var"], dtype=np.float64)

    def segment_of(self, layer_path: str) -> str:
        top = layer_path.split(".")[0]
        idx = self.layer_names.index(top)
        for seg in self.segmentation.segments:
            if seg.start <= idx < seg.end:
                return seg.name
        raise KeyError(f"layer {layer_path!r} not covered by segmentation")

    def segment_param_layers(self, segment_name: str):
        seg = self.segmentation.span(segment_name)
        out = []
        for i in range(seg.start, seg.end):
            name, layer = self.layer_names[i], self.layers[i]
            if hasattr(layer, "sublayers"):
                out += [(f"{name}.{s}", sub) for s, sub in layer.sublayers() if sub.params()]
            elif layer.params():
                out.append((name, layer))
        return out

    def segment_state_hash(self, segment_name: str) -> str:
        h = hashlib.sha256()
        for path, layer in self.segment_param_layers(segment_name):
            for p, arr in layer.state():
                h.update(f"{path}.{p}".encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelGraph":
        return _copy.deepcopy(self)

    def initialize(self, seed: int) -> None:
        for path, layer in self.flat_layers():
            layer.init_params(derive_rng(seed, "init", path))


@dataclass
class FreezeMask:
    """Per-parameter trainability derived from segment (or layer) names."""

    trainable_params: dict = field(default_factory=dict)  # param path -> bool
    trainable_layers: set = field(default_factory=set)  # layer paths

    def is_trainable(self, param_path: str) -> bool:
        return self.trainable_params[param_path]

    def apply_to(self, model: ModelGraph) -> None:
        """Mark frozen batchnorms so their running stats stay pinned."""
        for path, layer in model.flat_layers():
            if isinstance(layer, BatchNorm2d):
                layer.stats_frozen = path not in self.trainable_layers

    @staticmethod
    def all_trainable(model: ModelGraph) -> "FreezeMask":
        return freeze_except(model, model.segmentation.names)


def freeze_except(model: ModelGraph, trainable_segments) -> FreezeMask:
    """Mask marking exactly the listed segments trainable, all else frozen."""
    trainable_segments = list(trainable_segments)
    model.segmentation.check_names(trainable_segments)
    layer_paths = set()
    for seg_name in trainable_segments:
        layer_paths.update(path for path, _ in model.segment_param_layers(seg_name))
    return freeze_except_layers(model, layer_paths, _validate=False)


def freeze_except_layers(model: ModelGraph, trainable_layer_paths, _validate: bool = True) -> FreezeMask:
    """Layer-granularity mask for the per-layer experiments."""
    trainable_layer_paths = set(trainable_layer_paths)
    if _validate:
        known = {path for path, _ in model.flat_layers()}
        unknown = trainable_layer_paths - known
        if unknown:
            raise KeyError(f"unknown layer path(s) {sorted(unknown)}")
    mask = FreezeMask(trainable_layers=trainable_layer_paths)
    for path, layer in model.flat_layers():
        flag = path in trainable_layer_paths
        for p, _ in layer.params():
            mask.trainable_params[f"{path}.{p}"] = flag
    return mask


def reinit_segments(model: ModelGraph, segment_names, seed: int) -> ModelGraph:
    """Copy of the model with the named segments' parameters re-drawn.

    Batchnorm running stats inside reinitialized segments are reset; every
    other array is bit-identical to the input model.
    """
    segment_names = list(segment_names)
    model.segmentation.check_names(segment_names)
    paths = []
    for seg_name in segment_names:
        paths += [path for path, _ in model.segment_param_layers(seg_name)]
    return reinit_layers(model, paths, seed, _validate=False)


def reinit_layers(model: ModelGraph, layer_paths, seed: int, _validate: bool = True) -> ModelGraph:
    if _validate:
        known = {path for path, _ in model.flat_layers()}
        unknown = set(layer_paths) - known
        if unknown:
            raise KeyError(f"unknown layer path(s) {sorted(unknown)}")
    out = model.copy()
    todo = set(layer_paths)
    for path, layer in out.flat_layers():
        if path in todo:
            layer.init_params(derive_rng(seed, "init", path))
    return out


def _require_input(input_shape, downsamplings: int) -> None:
    c, h, w = input_shape
    factor = 2 ** downsamplings
    if min(h, w) < 32:
        raise ValueError(f"input spatial extent must be >= 32, got {h}x{w}")
    if h % factor or w % factor:
        raise ValueError(
            f"input spatial extents must be divisible by {factor} "
            f"for {downsamplings} down-sampling stages, got {h}x{w}"
        )


def _scaled(width: int, multiplier: float) -> int:
    return max(1, int(round(width * multiplier)))


def build_mini_vgg(input_shape=(3, 32, 32), classes: int = 10,
                   width_multiplier: float = 1.0, seed: int = 0) -> ModelGraph:
    """Small VGG-style stack: conv/bn/relu groups split by max-pooling.

    Segments m_0..m_4 each end at a pooling layer; m_fc is GAP plus the head.
    """
    _require_input(input_shape, downsamplings=5)
    c_in = input_shape[0]
    w = [_scaled(b, width_multiplier) for b in (16, 32, 64, 128, 128)]
    convs_per_seg = (1, 1, 2, 2, 2)

    named, segments, conv_idx = [], [], 0
    prev = c_in
    for seg_i, (width, n_conv) in enumerate(zip(w, convs_per_seg)):
        start = len(named)
        for _ in range(n_conv):
            named.append((f"conv{conv_idx}", Conv2d(prev, width, 3, 1, 1)))
            named.append((f"bn{conv_idx}", BatchNorm2d(width)))
            named.append((f"relu{conv_idx}", ReLU()))
            prev = width
            conv_idx += 1
        named.append((f"pool{seg_i}", MaxPool2d(2)))
        segments.append(Segment(f"m_{seg_i}", start, len(named)))
    start = len(named)
    named.append(("gap", GlobalAvgPool()))
    named.append(("fc", Linear(prev, classes)))
    segments.append(Segment("m_fc", start, len(named)))

    desc = (
        f"mini_vgg|in={input_shape[0]}x{input_shape[1]}x{input_shape[2]}"
        f"|classes={classes}|width={width_multiplier!r}"
    )
    model = ModelGraph(named, ModuleSegmentation(segments), input_shape, classes, desc)
    model.initialize(seed)
    return model


def build_mini_resnet(input_shape=(3, 32, 32), classes: int = 10, blocks_per_stage: int = 2,
                      width_multiplier: float = 1.0, seed: int = 0) -> ModelGraph:
    """Small residual net: stride-1 stem (m_0), four stages (m_1..m_4) whose
    first block down-samples with stride 2, then GAP plus head (m_fc)."""
    _require_input(input_shape, downsamplings=4)
    c_in = input_shape[0]
    stem_w = _scaled(16, width_multiplier)
    stage_w = [_scaled(b, width_multiplier) for b in (16, 32, 64, 128)]

    named = [
        ("stem_conv", Conv2d(c_in, stem_w, 3, 1, 1)),
        ("stem_bn", BatchNorm2d(stem_w)),
        ("stem_relu", ReLU()),
    ]
    segments = [Segment("m_0", 0, len(named))]
    prev = stem_w
    for stage_i, width in enumerate(stage_w, start=1):
        start = len(named)
        for block_i in range(blocks_per_stage):
            stride = 2 if block_i == 0 else 1
            named.append((f"stage{stage_i}_block{block_i}", BasicBlock(prev, width, stride)))
            prev = width
        segments.append(Segment(f"m_{stage_i}", start, len(named)))
    start = len(named)
    named.append(("gap", GlobalAvgPool()))
    named.append(("fc", Linear(prev, classes)))
    segments.append(Segment("m_fc", start, len(named)))

    desc = (
        f"mini_resnet|in={input_shape[0]}x{input_shape[1]}x{input_shape[2]}"
        f"|classes={classes}|blocks={blocks_per_stage}|width={width_multiplier!r}"
    )
    model = ModelGraph(named, ModuleSegmentation(segments), input_shape, classes, desc)
    model.initialize(seed)
    return model


def build_from_descriptor(descriptor: str, seed: int = 0) -> ModelGraph:
    """Rebuild a zoo model from its checkpoint descriptor string."""
    parts = descriptor.split("|")
    kind, kv = parts[0], dict(p.split("=", 1) for p in parts[1:])
    c, h, w = (int(v) for v in kv["in"].split("x"))
    classes = int(kv["classes"])
    if kind == "mini_vgg":
        return build_mini_vgg((c, h, w), classes, float(kv["width"]), seed=seed)
    if kind == "mini_resnet":
        return build_mini_resnet((c, h, w), classes, int(kv["blocks"]), float(kv["width"]), seed=seed)
    raise ValueError(f"cannot rebuild architecture from descriptor {descriptor!r}")

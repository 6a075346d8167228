"""VGG19_reduced and ResNet23 multiscale networks.

A network is a shared convolutional trunk applied to each pyramid level,
followed by per-pixel dense layers on the fused features.  Specs are
declarative and immutable; parameters live in a flat ``name -> array`` dict.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .multiscale import SCALES, build_pyramid, fuse_coarse, fuse_coarse_backward
from .tensor import DTYPE, RngState, draw, relu, relu_backward, upsample, upsample_backward

ARCHS = ("vgg19_reduced", "resnet23")
ROLES = ("segmenter", "classifier")
HEAD_WIDTH = {"segmenter": 2, "classifier": 7}
WEIGHT_DECAY = {"vgg19_reduced": 0.0005, "resnet23": 0.0001}
KEEP_PROB = 0.85

# printed totals, and which bookkeeping each printed total leaves out
PUBLISHED_TOTALS = {
    ("vgg19_reduced", "segmenter"): 4421824,
    ("vgg19_reduced", "classifier"): 4423104,
    ("resnet23", "segmenter"): 2143618,
    ("resnet23", "classifier"): 2148743,
}
PUBLISHED_EXCLUDES = {
    "vgg19_reduced": ("conv_bias", "bn", "dense_bias"),
    "resnet23": ("fused_width",),
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | maxpool | dense | dropout
    kernel: int | None = None
    out_channels: int | None = None
    residual_from: str | None = None
    keep_prob: float | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "dense", "dropout"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.kernel not in (3, 7):
            raise ValueError(f"conv kernel must be 3 or 7, got {self.kernel}")


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    role: str
    layers: tuple
    pool_factor: int
    trunk_channels: int
    head_widths: tuple
    weight_decay: float
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        names = []
        for layer in self.layers:
            if layer.residual_from is not None and layer.residual_from not in names:
                raise ValueError(f"{layer.name}: shortcut source {layer.residual_from} is not an earlier layer")
            names.append(layer.name)
        if self.head_widths[-1] != HEAD_WIDTH[self.role]:
            raise ValueError("final head width does not match the role")

    @property
    def num_classes(self) -> int:
        return self.head_widths[-1]

    @property
    def trunk(self):
        return tuple(l for l in self.layers if l.kind in ("conv", "maxpool"))

    @property
    def head(self):
        return tuple(l for l in self.layers if l.kind in ("dense", "dropout"))

    @property
    def residual_links(self):
        return [(l.name, l.residual_from) for l in self.layers if l.residual_from]

    def to_json(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_json(cls, d) -> "NetworkSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        d["head_widths"] = tuple(d["head_widths"])
        return cls(**d)


def _conv(i, k, c, res=None):
    return LayerSpec(f"conv{i}", "conv", kernel=k, out_channels=c, residual_from=res)


def network_spec(arch: str, role: str, keep_prob: float = KEEP_PROB) -> NetworkSpec:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; choose from {ROLES}")
    out = HEAD_WIDTH[role]
    if arch == "vgg19_reduced":
        trunk = [
            _conv(0, 3, 64), _conv(1, 3, 64), LayerSpec("maxpool0", "maxpool"),
            _conv(2, 3, 128), _conv(3, 3, 128), LayerSpec("maxpool1", "maxpool"),
            _conv(4, 3, 256), _conv(5, 3, 256), _conv(6, 3, 256), _conv(7, 3, 256),
        ]
        widths = (1024, 1024, 256, out)
        head = [
            LayerSpec("fc0", "dense", out_channels=1024), LayerSpec("drop0", "dropout", keep_prob=keep_prob),
            LayerSpec("fc1", "dense", out_channels=1024), LayerSpec("drop1", "dropout", keep_prob=keep_prob),
            LayerSpec("fc2", "dense", out_channels=256),
            LayerSpec("fc3", "dense", out_channels=out, activation="identity"),
        ]
        trunk_channels = 256
    else:
        shortcuts = {2: "conv0", 4: "maxpool0", 6: "conv4", 8: "conv6", 10: "conv8",
                     12: "maxpool1", 14: "conv12", 16: "conv14", 18: "conv16", 20: "conv18"}
        trunk = [_conv(i, 7, 32, shortcuts.get(i)) for i in range(3)]
        trunk.append(LayerSpec("maxpool0", "maxpool"))
        trunk += [_conv(i, 3, 64, shortcuts.get(i)) for i in range(3, 9)]
        trunk += [_conv(i, 3, 128, shortcuts.get(i)) for i in (9, 10)]
        trunk.append(LayerSpec("maxpool1", "maxpool"))
        trunk += [_conv(i, 3, 128, shortcuts.get(i)) for i in range(11, 21)]
        widths = (1024, out)
        head = [
            LayerSpec("fc0", "dense", out_channels=1024), LayerSpec("drop0", "dropout", keep_prob=keep_prob),
            LayerSpec("fc1", "dense", out_channels=out, activation="identity"),
        ]
        trunk_channels = 128
    return NetworkSpec(arch, role, tuple(trunk + head), pool_factor=4, trunk_channels=trunk_channels,
                       head_widths=widths, weight_decay=WEIGHT_DECAY[arch])


def init_parameters(spec: NetworkSpec, rng: RngState, dtype=DTYPE):
    """He-normal weights, zero biases, unit gamma / zero beta.

    Returns ``(params, buffers)``; buffers hold batch-norm running statistics,
    one row per pyramid scale.
    """
    params, buffers = {}, {}
    c = 3
    for layer in spec.trunk:
        if layer.kind != "conv":
            continue
        k, o = layer.kernel, layer.out_channels
        fan_in = c * k * k
        params[f"{layer.name}.weight"] = draw(rng, "normal", (o, c, k, k), dtype=dtype, sigma=np.sqrt(2.0 / fan_in))
        params[f"{layer.name}.bias"] = np.zeros(o, dtype)
        params[f"{layer.name}.bn.gamma"] = np.ones(o, dtype)
        params[f"{layer.name}.bn.beta"] = np.zeros(o, dtype)
        buffers[f"{layer.name}.bn.running_mean"] = np.zeros((len(SCALES), o), dtype)
        buffers[f"{layer.name}.bn.running_var"] = np.ones((len(SCALES), o), dtype)
        c = o
    c *= len(SCALES)
    for layer in spec.head:
        if layer.kind != "dense":
            continue
        o = layer.out_channels
        params[f"{layer.name}.weight"] = draw(rng, "normal", (o, c), dtype=dtype, sigma=np.sqrt(2.0 / c))
        params[f"{layer.name}.bias"] = np.zeros(o, dtype)
        c = o
    return params, buffers


def decayed_names(params):
    """Parameters subject to L2 weight decay: conv and dense weights only."""
    return [n for n in params if n.endswith(".weight")]


class Network:
    """Multiscale pixel-wise network: forward to per-pixel logits and backward to parameter gradients."""

    def __init__(self, spec: NetworkSpec, params: dict, buffers: dict):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self._tape = None
        self._act_channels = activation_channels(spec)

    @classmethod
    def build(cls, arch, role, rng: RngState, dtype=DTYPE, keep_prob: float = KEEP_PROB):
        spec = network_spec(arch, role, keep_prob)
        return cls(spec, *init_parameters(spec, rng, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        return Network(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                       {k: v.astype(dtype) for k, v in self.buffers.items()})

    # -- trunk --------------------------------------------------------------

    def _bn(self, name, scale_index):
        p = self.params
        return L.BatchNormParams(
            p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
            self.buffers[f"{name}.bn.running_mean"][scale_index],
            self.buffers[f"{name}.bn.running_var"][scale_index],
            momentum=self.spec.bn_momentum, eps=self.spec.bn_eps)

    def _conv(self, name):
        return L.ConvParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def trunk_forward(self, x, scale_index: int, mode: str):
        acts, tape = {}, []
        h = x
        for layer in self.spec.trunk:
            if layer.kind == "maxpool":
                out, idx = L.maxpool2(h)
                tape.append((layer, idx))
            else:
                z = L.conv2d(h, self._conv(layer.name))
                zb, bn_cache = L.batchnorm(z, self._bn(layer.name, scale_index), mode)
                if layer.residual_from:
                    zb = L.residual_add(zb, acts[layer.residual_from])
                out = relu(zb)
                tape.append((layer, (h, bn_cache, zb)))
            acts[layer.name] = out
            h = out
        return h, (scale_index, tape)

    def trunk_backward(self, dout, cache, grads):
        scale_index, tape = cache
        pending = {}
        g = dout
        for layer, saved in reversed(tape):
            if layer.name in pending:
                g = g + pending.pop(layer.name)
            if layer.kind == "maxpool":
                g = L.maxpool2_backward(g, saved)
                continue
            h_in, bn_cache, zb = saved
            dz = relu_backward(zb, g)
            if layer.residual_from:
                _, dshort = L.residual_add_backward(dz, self._act_channels[layer.residual_from])
                prev = pending.get(layer.residual_from)
                pending[layer.residual_from] = dshort if prev is None else prev + dshort
            dz, dgamma, dbeta = L.batchnorm_backward(dz, bn_cache, self._bn(layer.name, scale_index))
            first = layer is self.spec.trunk[0]
            dx, dw, db = L.conv2d_backward(dz, h_in, self._conv(layer.name), need_dx=not first)
            _acc(grads, f"{layer.name}.weight", dw)
            _acc(grads, f"{layer.name}.bias", db)
            _acc(grads, f"{layer.name}.bn.gamma", dgamma)
            _acc(grads, f"{layer.name}.bn.beta", dbeta)
            g = dx
        return g

    # -- full network -------------------------------------------------------

    def forward(self, x, mode: str = L.EVAL, rng: RngState | None = None, keep_tape: bool | None = None):
        """Per-pixel logits ``(N, num_classes, H, W)`` for an ``(N, 3, H, W)`` batch.

        The fused features are constant over ``pool_factor``-sized blocks, so
        the head runs at trunk resolution until the first active dropout and is
        upsampled there; per-pixel layers commute with nearest upsampling.
        """
        if keep_tape is None:
            keep_tape = mode == L.TRAIN
        pyramid = build_pyramid(x)
        outs, caches = [], []
        for s, level in enumerate(pyramid.levels):
            o, c = self.trunk_forward(level, s, mode)
            outs.append(o)
            caches.append(c)
        h = fuse_coarse(outs)
        pf = self.spec.pool_factor
        upsampled = False
        head_tape = []
        for layer in self.spec.head:
            if layer.kind == "dropout":
                if mode == L.EVAL or layer.keep_prob == 1:
                    continue
                if not upsampled:
                    h = upsample(h, pf)
                    upsampled = True
                    head_tape.append(("upsample", None))
                h, mask = L.dropout(h, layer.keep_prob, mode, rng)
                head_tape.append((layer, mask))
            else:
                p = L.DenseParams(self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])
                z = L.dense_per_pixel(h, p)
                out = relu(z) if layer.activation == "relu" else z
                head_tape.append((layer, (h, z)))
                h = out
        if not upsampled:
            h = upsample(h, pf)
            head_tape.append(("upsample", None))
        self._tape = (caches, head_tape) if keep_tape else None
        return h

    def backward(self, dlogits):
        """Gradients of all parameters given d loss / d logits from the last taped forward."""
        if self._tape is None:
            raise RuntimeError("backward called without a taped forward pass")
        caches, head_tape = self._tape
        grads = {}
        g = dlogits
        for entry, saved in reversed(head_tape):
            if entry == "upsample":
                g = upsample_backward(g, self.spec.pool_factor)
            elif entry.kind == "dropout":
                g = L.dropout_backward(g, saved)
            else:
                h_in, z = saved
                if entry.activation == "relu":
                    g = relu_backward(z, g)
                p = L.DenseParams(self.params[f"{entry.name}.weight"], self.params[f"{entry.name}.bias"])
                g, dw, db = L.dense_per_pixel_backward(g, h_in, p)
                _acc(grads, f"{entry.name}.weight", dw)
                _acc(grads, f"{entry.name}.bias", db)
        for dscale, cache in zip(fuse_coarse_backward(g), caches):
            self.trunk_backward(dscale, cache, grads)
        self._tape = None
        return grads

    def predict_proba(self, x):
        return L.softmax_per_pixel(self.forward(x, L.EVAL, keep_tape=False))

    def predict(self, x):
        return self.forward(x, L.EVAL, keep_tape=False).argmax(axis=1)


def _acc(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def activation_channels(spec: NetworkSpec) -> dict:
    """Channel count of every trunk layer's output."""
    out, c = {}, 3
    for layer in spec.trunk:
        if layer.kind == "conv":
            c = layer.out_channels
        out[layer.name] = c
    return out


# --- parameter accounting --------------------------------------------------

@dataclass
class LayerCount:
    name: str
    kind: str
    shape: str
    weights: int
    bias: int
    bn: int = 0

    @property
    def total(self):
        return self.weights + self.bias + self.bn


@dataclass
class ParameterReport:
    arch: str
    role: str
    layers: list = field(default_factory=list)
    fused_width_weights: int = 0  # fc0 weights fed by the two upsampled scales

    @property
    def total(self):
        return sum(l.total for l in self.layers)

    def component(self, key) -> int:
        if key == "conv_bias":
            return sum(l.bias for l in self.layers if l.kind == "conv")
        if key == "dense_bias":
            return sum(l.bias for l in self.layers if l.kind == "dense")
        if key == "bn":
            return sum(l.bn for l in self.layers)
        if key == "fused_width":
            return self.fused_width_weights
        raise KeyError(key)

    @property
    def published_total(self):
        return PUBLISHED_TOTALS[(self.arch, self.role)]

    @property
    def delta(self):
        """Signed difference, this build minus the printed total."""
        return self.total - self.published_total

    @property
    def attribution(self):
        return {k: self.component(k) for k in PUBLISHED_EXCLUDES[self.arch]}

    @property
    def unexplained(self):
        return self.delta - sum(self.attribution.values())

    def lines(self):
        out = [f"{'layer':<10} {'kind':<6} {'shape':<16} {'weights':>9} {'bias':>6} {'bn':>5} {'total':>9}"]
        for l in self.layers:
            out.append(f"{l.name:<10} {l.kind:<6} {l.shape:<16} {l.weights:>9} {l.bias:>6} {l.bn:>5} {l.total:>9}")
        out.append(f"total {self.total}  published {self.published_total}  delta {self.delta:+d}")
        for k, v in self.attribution.items():
            out.append(f"  attributed to {k}: {v:+d}")
        out.append(f"  unexplained: {self.unexplained:+d} ({100 * self.unexplained / self.published_total:+.4f}%)")
        return out

    def to_json(self):
        return {
            "arch": self.arch, "role": self.role, "total": self.total,
            "published_total": self.published_total, "delta": self.delta,
            "attribution": self.attribution, "unexplained": self.unexplained,
            "layers": [asdict(l) | {"total": l.total} for l in self.layers],
        }


def count_parameters(spec: NetworkSpec, params: dict | None = None) -> ParameterReport:
    """Per-layer and total learned parameter counts, compared against the published reference totals."""
    rep = ParameterReport(spec.arch, spec.role)
    c = 3
    for layer in spec.trunk:
        if layer.kind != "conv":
            continue
        k, o = layer.kernel, layer.out_channels
        rep.layers.append(LayerCount(layer.name, "conv", f"{k}x{k}x{c}x{o}", k * k * c * o, o, 2 * o))
        c = o
    trunk_c = c
    c *= len(SCALES)
    first = True
    for layer in spec.head:
        if layer.kind != "dense":
            continue
        o = layer.out_channels
        rep.layers.append(LayerCount(layer.name, "dense", f"{c}x{o}", c * o, o))
        if first:
            rep.fused_width_weights = (c - trunk_c) * o
            first = False
        c = o
    if params is not None:
        actual = sum(v.size for v in params.values())
        if actual != rep.total:
            raise ValueError(f"parameter set holds {actual} values, spec accounts for {rep.total}")
    return rep


def spec_dumps(spec: NetworkSpec) -> str:
    return json.dumps(spec.to_json(), sort_keys=True)

"""Segmentation network with an auxiliary head, and the patch discriminator."""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError
from .tensor import Tensor

DISC_CHANNELS = (64, 128, 256, 512, 1)
DISC_SLOPE = 0.2


@dataclass(frozen=True)
class SegNetSpec:
    n_classes: int = 4
    widths: tuple = (16, 32, 64, 64, 64)
    in_channels: int = 3
    kernel: int = 3
    aspp_rates: tuple = (1, 2, 4)

    # (stride, dilation) for blocks B1..B5: three downsampling blocks then two dilated ones
    block_geometry = ((2, 1), (2, 1), (2, 1), (1, 2), (1, 4))

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ConfigurationError(f"need 5 trunk widths, got {self.widths}")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be at least 2")
        if len(self.aspp_rates) < 2:
            raise ConfigurationError("an ASPP head needs at least two branches")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int
    channels: tuple = DISC_CHANNELS
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    slope: float = DISC_SLOPE


def _he_normal(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Params:
    """Ordered, named collection of learnable tensors."""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict(tensors or ())

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def set_requires_grad(self, flag):
        for t in self.tensors.values():
            t.requires_grad = flag

    def snapshot(self):
        return OrderedDict((k, t.data.copy()) for k, t in self.tensors.items())

    def load(self, arrays):
        for k, arr in arrays.items():
            if k not in self.tensors:
                raise ConfigurationError(f"unknown parameter {k!r}")
            if self.tensors[k].shape != arr.shape:
                raise ConfigurationError(
                    f"parameter {k!r}: shape {arr.shape} does not match {self.tensors[k].shape}")
            self.tensors[k].data = np.array(arr, dtype=np.float32)


class SegNet(Params):
    def __init__(self, spec, tensors):
        super().__init__(tensors)
        self.spec = spec

    @property
    def feature_channels(self):
        return self.spec.widths[3]

    def __call__(self, image):
        return seg_forward(self, image)


class Discriminator(Params):
    def __init__(self, spec, tensors):
        super().__init__(tensors)
        self.spec = spec

    def __call__(self, prediction):
        return disc_forward(self, prediction)


def init_segnet(seed, spec=None, zero_heads=False):
    """He-normal conv weights, zero biases; deterministic in ``seed``."""
    spec = spec or SegNetSpec()
    rng = np.random.default_rng(seed)
    k = spec.kernel
    tensors = []
    cin = spec.in_channels
    for i, width in enumerate(spec.widths, start=1):
        tensors.append((f"trunk.b{i}.weight", _he_normal(rng, (width, cin, k, k))))
        tensors.append((f"trunk.b{i}.bias", np.zeros(width, np.float32)))
        cin = width
    for head, width in (("main", spec.widths[4]), ("aux", spec.widths[3])):
        for rate in spec.aspp_rates:
            shape = (spec.n_classes, width, k, k)
            w = np.zeros(shape, np.float32) if zero_heads else _he_normal(rng, shape)
            tensors.append((f"{head}.r{rate}.weight", w))
            tensors.append((f"{head}.r{rate}.bias", np.zeros(spec.n_classes, np.float32)))
    return SegNet(spec, [(n, Tensor(a, requires_grad=True)) for n, a in tensors])


def init_discriminator(seed, in_channels, zero_last=False, spec=None):
    spec = spec or DiscriminatorSpec(in_channels)
    rng = np.random.default_rng(seed)
    tensors = []
    cin = spec.in_channels
    for i, cout in enumerate(spec.channels, start=1):
        shape = (cout, cin, spec.kernel, spec.kernel)
        last = i == len(spec.channels)
        w = np.zeros(shape, np.float32) if (last and zero_last) else _he_normal(rng, shape)
        tensors.append((f"conv{i}.weight", Tensor(w, requires_grad=True)))
        tensors.append((f"conv{i}.bias", Tensor(np.zeros(cout, np.float32), requires_grad=True)))
        cin = cout
    return Discriminator(spec, tensors)


def _aspp(params, head, x):
    out = None
    for rate in params.spec.aspp_rates:
        branch = T.conv2d(x, params[f"{head}.r{rate}.weight"], params[f"{head}.r{rate}.bias"],
                          stride=1, padding=rate * (params.spec.kernel // 2), dilation=rate)
        out = branch if out is None else T.add(out, branch)
    return out


def seg_forward(params, image):
    """Returns {"P1": main softmax, "P2": aux softmax, "F2": B4 features}.

    Both probability maps are upsampled back to the image size before the
    softmax; the trunk runs at 1/8 resolution.
    """
    if image.ndim != 4 or image.shape[1] != params.spec.in_channels:
        raise ConfigurationError(
            f"expected image [N,{params.spec.in_channels},H,W], got {image.shape}")
    h, w = image.shape[2:]
    if h % 8 or w % 8:
        raise ConfigurationError(f"image size {h}x{w} must be divisible by 8")
    pad = params.spec.kernel // 2
    x = image
    feats = []
    for i, (stride, dilation) in enumerate(params.spec.block_geometry, start=1):
        x = T.conv2d(x, params[f"trunk.b{i}.weight"], params[f"trunk.b{i}.bias"],
                     stride=stride, padding=pad * dilation, dilation=dilation)
        x = T.relu(x)
        feats.append(x)
    f2 = feats[3]
    main = T.upsample_bilinear(_aspp(params, "main", feats[4]), h, w)
    aux = T.upsample_bilinear(_aspp(params, "aux", f2), h, w)
    return {"P1": T.softmax_channels(main), "P2": T.softmax_channels(aux), "F2": f2}


def disc_logits(params, prediction):
    """Low-resolution logit map of the discriminator, before upsampling."""
    spec = params.spec
    if prediction.ndim != 4 or prediction.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"discriminator built for {spec.in_channels} channels, got input {prediction.shape}")
    h, w = prediction.shape[2:]
    min_size = 2 ** len(spec.channels)
    if h < min_size or w < min_size:
        raise ConfigurationError(
            f"discriminator input {h}x{w} is too small for {len(spec.channels)} stride-2 layers "
            f"(need at least {min_size}x{min_size})")
    x = prediction
    n_layers = len(spec.channels)
    for i in range(1, n_layers + 1):
        x = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                     stride=spec.stride, padding=spec.padding)
        if i < n_layers:
            x = T.leaky_relu(x, spec.slope)
    return x


def disc_forward(params, prediction):
    """Per-pixel probability that ``prediction`` came from the source domain."""
    h, w = prediction.shape[2:]
    logits = disc_logits(params, prediction)
    return T.sigmoid(T.upsample_bilinear(logits, h, w))

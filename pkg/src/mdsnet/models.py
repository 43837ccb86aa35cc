"""SupervisionNet (SN) and the density map estimator (DME).

Channel plan for base width b and M decoder nodes: node n (1-based, counted
from the bottleneck) carries b * 2**(M - n) channels at 1 / 2**(M - n) of the
input resolution, in both networks, so SN decoder features can supervise the
DME decoder tap of the same node channel by channel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensorgrad as tg
from .errors import ConfigurationError
from .tensorgrad import ParamSet, Tensor

UP_KERNEL = 4  # transposed conv k=4, stride 2, padding 1 doubles the side exactly


@dataclass
class ArchConfig:
    in_channels: int = 1
    base_channels: int = 8
    num_nodes: int = 3
    head_mode: str = "density"
    encoder_depth: int = 3
    se_reduction: int = 4

    def __post_init__(self):
        if self.head_mode not in ("density", "dot"):
            raise ConfigurationError(f"head_mode must be 'density' or 'dot', got {self.head_mode!r}")
        if self.num_nodes != self.encoder_depth:
            raise ConfigurationError(
                f"num_nodes ({self.num_nodes}) must equal encoder_depth ({self.encoder_depth}): "
                "each decoder node undoes one downsampling stage"
            )
        if min(self.in_channels, self.base_channels, self.num_nodes, self.se_reduction) < 1:
            raise ConfigurationError(f"architecture sizes must be positive: {self}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.encoder_depth

    def node_channels(self) -> list[int]:
        return [self.base_channels * 2 ** (self.num_nodes - n) for n in range(1, self.num_nodes + 1)]

    def node_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        self.check_size(h, w)
        m = self.num_nodes
        return [(c, h >> (m - n), w >> (m - n)) for n, c in enumerate(self.node_channels(), start=1)]

    def check_size(self, h: int, w: int):
        f = 2**self.encoder_depth
        if h % f or w % f:
            raise ConfigurationError(f"image side {h}x{w} must be divisible by {f}")

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_param(params: ParamSet, rng, name: str, c_in: int, c_out: int, k: int):
    params.add(f"{name}.weight", tg.glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
    params.add(f"{name}.bias", np.zeros(c_out))


def _tconv_param(params: ParamSet, rng, name: str, c_in: int, c_out: int, k: int):
    params.add(f"{name}.weight", tg.glorot_uniform(rng, (c_in, c_out, k, k), c_in * k * k, c_out * k * k))
    params.add(f"{name}.bias", np.zeros(c_out))


def _linear_param(params: ParamSet, rng, name: str, d_in: int, d_out: int):
    params.add(f"{name}.weight", tg.glorot_uniform(rng, (d_out, d_in), d_in, d_out))
    params.add(f"{name}.bias", np.zeros(d_out))


def _conv(params: ParamSet, name: str, x: Tensor, stride: int = 1, act: str | None = "relu") -> Tensor:
    w = params[f"{name}.weight"]
    y = tg.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)
    return tg.activation(y, act) if act else y


def _up(params: ParamSet, name: str, x: Tensor) -> Tensor:
    y = tg.conv2d_transpose(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, padding=1)
    return tg.relu(y)


# ---------------------------------------------------------------- SE block


@dataclass
class SEState:
    """Parameters of one squeeze-and-excitation block."""

    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    @classmethod
    def from_params(cls, params: ParamSet, name: str) -> SEState:
        return cls(params[f"{name}.fc1.weight"], params[f"{name}.fc1.bias"], params[f"{name}.fc2.weight"], params[f"{name}.fc2.bias"])


def se_hidden_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def add_se_params(params: ParamSet, rng, name: str, channels: int, reduction: int):
    hidden = se_hidden_width(channels, reduction)
    _linear_param(params, rng, f"{name}.fc1", channels, hidden)
    _linear_param(params, rng, f"{name}.fc2", hidden, channels)


def se_block_forward(features: Tensor, state: SEState) -> tuple[Tensor, Tensor]:
    """Returns (features rescaled per channel, channel weights [N, C] in (0, 1))."""
    squeezed = tg.global_avg_pool(features)
    hidden = tg.relu(tg.linear(squeezed, state.fc1_weight, state.fc1_bias))
    weights = tg.sigmoid(tg.linear(hidden, state.fc2_weight, state.fc2_bias))
    n, c = weights.shape
    scaled = tg.mul(features, tg.reshape(weights, (n, c, 1, 1)))
    return scaled, weights


# ---------------------------------------------------------------- networks


@dataclass
class SupervisionBundle:
    """Per-node SN decoder features G^n [N, C_n, H_n, W_n] and channel weights W^n [N, C_n]."""

    features: list[np.ndarray]
    weights: list[np.ndarray]

    def __len__(self):
        return len(self.features)

    def shapes(self) -> list[tuple[int, ...]]:
        return [f.shape[1:] for f in self.features]

    def last(self, k: int) -> SupervisionBundle:
        if k == 0:
            return SupervisionBundle([], [])
        return SupervisionBundle(self.features[-k:], self.weights[-k:])


def _as_batch(x) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ConfigurationError(f"expected [C,H,W] or [N,C,H,W] input, got shape {arr.shape}")
    return x if isinstance(x, Tensor) and x.data.ndim == 4 else Tensor(arr)


class SupervisionNet:
    """Two-branch encoder (groundtruth + image) and an SE-attended decoder.

    Each branch has four convolutions; the first keeps the resolution and the
    remaining ``encoder_depth`` halve it.  The branches are concatenated and
    merged by a 1x1 convolution.  Every decoder node upsamples by two,
    convolves, and passes the result through an SE block; the pre-attention
    features and the SE weights form the supervision bundle.
    """

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        b, d = arch.base_channels, arch.encoder_depth
        widths = [b * 2**i for i in range(d + 1)]
        for branch, c_in in (("gt", 1), ("img", arch.in_channels)):
            prev = c_in
            for i, c in enumerate(widths):
                _conv_param(self.params, rng, f"sn.{branch}.conv{i}", prev, c, 3)
                prev = c
        _conv_param(self.params, rng, "sn.merge", 2 * widths[-1], widths[-1], 1)
        prev = widths[-1]
        for n, c in enumerate(arch.node_channels(), start=1):
            _tconv_param(self.params, rng, f"sn.dec{n}.up", prev, c, UP_KERNEL)
            _conv_param(self.params, rng, f"sn.dec{n}.conv", c, c, 3)
            add_se_params(self.params, rng, f"sn.dec{n}.se", c, arch.se_reduction)
            prev = c
        _conv_param(self.params, rng, "sn.head", prev, 1, 1)

    def _branch(self, name: str, x: Tensor) -> Tensor:
        for i in range(self.arch.encoder_depth + 1):
            x = _conv(self.params, f"sn.{name}.conv{i}", x, stride=1 if i == 0 else 2)
        return x

    def forward(self, gt_input, image) -> tuple[Tensor, SupervisionBundle]:
        gt, img = _as_batch(gt_input), _as_batch(image)
        if gt.shape[1] != 1 or img.shape[1] != self.arch.in_channels:
            raise ConfigurationError(f"SN expects 1 groundtruth channel and {self.arch.in_channels} image channels")
        self.arch.check_size(*img.shape[2:])
        if gt.shape[2:] != img.shape[2:]:
            raise ConfigurationError(f"groundtruth {gt.shape[2:]} and image {img.shape[2:]} sizes differ")
        x = tg.concat([self._branch("gt", gt), self._branch("img", img)], axis=1)
        x = _conv(self.params, "sn.merge", x)
        feats, weights = [], []
        self.last_features: list[Tensor] = []
        for n in range(1, self.arch.num_nodes + 1):
            x = _up(self.params, f"sn.dec{n}.up", x)
            x = _conv(self.params, f"sn.dec{n}.conv", x)
            self.last_features.append(x)
            feats.append(x.data)
            x, w = se_block_forward(x, SEState.from_params(self.params, f"sn.dec{n}.se"))
            weights.append(w.data)
        recon = _conv(self.params, "sn.head", x, act="relu")
        return recon, SupervisionBundle(feats, weights)

    __call__ = forward


class DensityMapEstimator:
    """Encoder of ``encoder_depth`` (conv, stride-2 conv) blocks, decoder of M (conv, x2 transposed conv)
    sets with a tap after each set, and two output convolutions."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        b = arch.base_channels
        prev = arch.in_channels
        for i in range(arch.encoder_depth):
            c = b * 2 ** (i + 1)
            _conv_param(self.params, rng, f"dme.enc{i}.conv", prev, c, 3)
            _conv_param(self.params, rng, f"dme.enc{i}.down", c, c, 3)
            prev = c
        for n, c in enumerate(arch.node_channels(), start=1):
            _conv_param(self.params, rng, f"dme.dec{n}.conv", prev, c, 3)
            _tconv_param(self.params, rng, f"dme.dec{n}.up", c, c, UP_KERNEL)
            prev = c
        _conv_param(self.params, rng, "dme.out0", prev, prev, 3)
        _conv_param(self.params, rng, "dme.out1", prev, 1, 1)

    def check_bundle_shapes(self, bundle_shapes):
        """Raise unless SN bundle shapes equal this network's tap shapes (any input size)."""
        h = bundle_shapes[-1][1] if bundle_shapes else 0
        w = bundle_shapes[-1][2] if bundle_shapes else 0
        expected = self.arch.node_shapes(h, w) if bundle_shapes else []
        for n, (got, exp) in enumerate(zip(bundle_shapes, expected), start=1):
            if tuple(got) != tuple(exp):
                raise ConfigurationError(f"node {n}: SN bundle shape {tuple(got)} != DME tap shape {tuple(exp)}")
        if bundle_shapes and len(bundle_shapes) != len(expected):
            raise ConfigurationError(f"SN has {len(bundle_shapes)} nodes, DME has {len(expected)}")

    def forward(self, image) -> tuple[Tensor, list[Tensor]]:
        x = _as_batch(image)
        if x.shape[1] != self.arch.in_channels:
            raise ConfigurationError(f"DME expects {self.arch.in_channels} image channels, got {x.shape[1]}")
        self.arch.check_size(*x.shape[2:])
        for i in range(self.arch.encoder_depth):
            x = _conv(self.params, f"dme.enc{i}.conv", x)
            x = _conv(self.params, f"dme.enc{i}.down", x, stride=2)
        taps = []
        for n in range(1, self.arch.num_nodes + 1):
            x = _conv(self.params, f"dme.dec{n}.conv", x)
            x = _up(self.params, f"dme.dec{n}.up", x)
            taps.append(x)
        x = _conv(self.params, "dme.out0", x)
        head = "relu" if self.arch.head_mode == "density" else "sigmoid"
        out = _conv(self.params, "dme.out1", x, act=head)
        return out, taps

    __call__ = forward


def sn_forward(gt_input, image, net: SupervisionNet):
    return net.forward(gt_input, image)


def dme_forward(image, net: DensityMapEstimator):
    return net.forward(image)


def check_compatible(sn: SupervisionNet, dme: DensityMapEstimator):
    if sn.arch.node_channels() != dme.arch.node_channels():
        raise ConfigurationError(
            f"SN node channels {sn.arch.node_channels()} != DME node channels {dme.arch.node_channels()}"
        )

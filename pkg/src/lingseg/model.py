"""The language-modulated U-Net: backbone, contracting/expanding branches,
upsampling stack, and auxiliary probability heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .kernels import KernelPlan, KernelSpec, TextKernels, build_all_kernels
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv2d_per_sample,
    conv_transpose2d,
    relu,
    sigmoid,
)
from .text import LstmParams, init_lstm_params, lstm_encode_batch

# body convolution geometry is fixed: 5x5, stride 2, padding 2
BODY_KERNEL = 5
BODY_STRIDE = 2
BODY_PAD = 2
LOCATION_CHANNELS = 8
MODULATIONS = ("bidirectional", "expanding_only")


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; validated on construction."""

    image_hw: tuple[int, int] = (64, 64)
    depth: int = 3
    channels: int = 32
    backbone_blocks: int = 2
    backbone_channels: int = 64
    embed_dim: int = 32
    hidden_dim: int = 96
    max_len: int = 20
    dropout_p: float = 0.2
    text_kernel_spatial: int = 3
    text_kernel_mode: str = "full"
    modulation: str = "bidirectional"

    def __post_init__(self):
        h, w = self.image_hw
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.backbone_blocks < 1:
            raise ConfigError(f"backbone_blocks must be >= 1, got {self.backbone_blocks}")
        factor = 2 ** (self.depth + self.backbone_blocks)
        if h % factor or w % factor:
            raise ConfigError(
                f"image size {h}x{w} must be divisible by 2^(depth+backbone_blocks)={factor}")
        if self.hidden_dim % self.depth:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by depth {self.depth}")
        if self.modulation not in MODULATIONS:
            raise ConfigError(f"modulation must be one of {MODULATIONS}, "
                              f"got {self.modulation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.text_kernel_spatial not in (1, 3):
            raise ConfigError(
                f"text_kernel_spatial must be 1 or 3, got {self.text_kernel_spatial}")
        if self.text_kernel_mode not in ("full", "depthwise"):
            raise ConfigError(f"unknown text_kernel_mode {self.text_kernel_mode!r}")

    @property
    def backbone_downscale(self) -> int:
        return 2 ** self.backbone_blocks

    def grid_hw(self) -> tuple[int, int]:
        h, w = self.image_hw
        return h // self.backbone_downscale, w // self.backbone_downscale

    @property
    def feature_channels(self) -> int:
        """Channels of the visual representation fed to the first level."""
        return self.backbone_channels + LOCATION_CHANNELS

    def down_channels(self) -> list[int]:
        """Channel count of each contracting output, index 0 = the backbone grid."""
        return [self.feature_channels] + [self.channels] * self.depth

    def kernel_plan(self) -> KernelPlan:
        downs = self.down_channels()
        mode = self.text_kernel_mode
        sp = self.text_kernel_spatial
        up_specs = tuple(KernelSpec(sp, downs[j], downs[j], mode)
                         for j in range(1, self.depth + 1))
        if self.modulation == "expanding_only":
            return KernelPlan(down=None, up=up_specs, dropout_p=self.dropout_p)
        down_specs = tuple(KernelSpec(sp, downs[i], downs[i], mode)
                           for i in range(self.depth))
        return KernelPlan(down=down_specs, up=up_specs, dropout_p=self.dropout_p)


class ModelParams:
    """Named parameter registry with the batchnorm running state."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._bn: dict[str, BatchNormState] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        return tensor

    def add_bn(self, name: str, state: BatchNormState) -> BatchNormState:
        if name in self._bn:
            raise ConfigError(f"duplicate batchnorm state name {name!r}")
        self._bn[name] = state
        return state

    def t(self, name: str) -> Tensor:
        return self._tensors[name]

    def bn(self, name: str) -> BatchNormState:
        return self._bn[name]

    def named_tensors(self):
        return list(self._tensors.items())

    def bn_states(self):
        return list(self._bn.items())

    def trainable(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def freeze(self, prefix: str) -> int:
        n = 0
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                t.requires_grad = False
                n += 1
        return n

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def _uniform_fan_in(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def init_params(config: NetConfig, vocab_size: int, rng: np.random.Generator,
                dtype=np.float64) -> ModelParams:
    """Create every parameter tensor in a fixed, documented order.

    Conv/deconv/affine weights are uniform +-1/sqrt(fan_in); batchnorm is
    gamma=1, beta=0. The order of creation fixes both the checkpoint
    directory order and the rng consumption, so a (seed, config) pair fully
    determines the initial model.
    """
    params = ModelParams()
    m = config.depth
    ch = config.channels

    lstm = init_lstm_params(vocab_size, config.embed_dim, config.hidden_dim, rng, dtype)
    for name, t in lstm.named():
        params.add(name, t)

    def conv_block(name, cin, cout, bn=True):
        params.add(f"{name}.conv_w",
                   _uniform_fan_in(rng, (cout, cin, BODY_KERNEL, BODY_KERNEL),
                                   cin * BODY_KERNEL * BODY_KERNEL, dtype))
        if bn:
            params.add(f"{name}.bn_gamma", Tensor(np.ones(cout, dtype=dtype), requires_grad=True))
            params.add(f"{name}.bn_beta", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
            params.add_bn(f"{name}.bn", BatchNormState(cout, dtype=dtype))

    def deconv_block(name, cin, cout, bn=True, bias=False):
        params.add(f"{name}.deconv_w",
                   _uniform_fan_in(rng, (cin, cout, BODY_KERNEL, BODY_KERNEL),
                                   cin * BODY_KERNEL * BODY_KERNEL, dtype))
        if bias:
            params.add(f"{name}.deconv_b", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
        if bn:
            params.add(f"{name}.bn_gamma", Tensor(np.ones(cout, dtype=dtype), requires_grad=True))
            params.add(f"{name}.bn_beta", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
            params.add_bn(f"{name}.bn", BatchNormState(cout, dtype=dtype))

    cin = 3
    for bidx in range(config.backbone_blocks):
        conv_block(f"backbone.{bidx}", cin, config.backbone_channels)
        cin = config.backbone_channels

    plan = config.kernel_plan()
    slice_dim = config.hidden_dim // m
    if plan.down is not None:
        for i, spec in enumerate(plan.down, start=1):
            params.add(f"tkd.{i}.w",
                       _uniform_fan_in(rng, (spec.param_count, slice_dim), slice_dim, dtype))
            params.add(f"tkd.{i}.b", Tensor(np.zeros(spec.param_count, dtype=dtype),
                                            requires_grad=True))
    for j, spec in enumerate(plan.up, start=1):
        params.add(f"tku.{j}.w",
                   _uniform_fan_in(rng, (spec.param_count, slice_dim), slice_dim, dtype))
        params.add(f"tku.{j}.b", Tensor(np.zeros(spec.param_count, dtype=dtype),
                                        requires_grad=True))

    downs = config.down_channels()
    modulated_down = plan.down is not None
    for i in range(1, m + 1):
        in_ch = downs[i - 1] * (2 if modulated_down else 1)
        conv_block(f"contract.{i}", in_ch, ch)

    for j in range(m, 0, -1):
        spec = plan.up[j - 1]
        in_ch = spec.cout + (0 if j == m else ch)
        deconv_block(f"expand.{j}", in_ch, ch)

    for k in range(config.backbone_blocks):
        last = k == config.backbone_blocks - 1
        deconv_block(f"dstack.{k}", ch, 1 if last else ch, bn=not last, bias=last)

    for j in range(m, 0, -1):
        deconv_block(f"aux.{j}", ch, 1, bn=False, bias=True)

    return params


@dataclass
class ForwardTrace:
    """Structural record of one forward pass, for ablation containment checks."""

    down_modulations: int = 0
    up_modulations: int = 0
    kernel_spatials: set = field(default_factory=set)


@dataclass
class ForwardOutput:
    """Final probability map plus per-level auxiliary maps (deepest first)."""

    p: Tensor
    aux: list[Tensor]
    trace: ForwardTrace


def build_location_features(gh: int, gw: int, dtype=np.float64) -> np.ndarray:
    """8 location channels: x_min/x_center/x_max, y_min/y_center/y_max in
    [-1,1] per cell, then the constant normalized cell width and height."""
    if gh < 1 or gw < 1:
        raise ParameterError(f"grid extents must be positive, got {gh}x{gw}")
    out = np.empty((LOCATION_CHANNELS, gh, gw), dtype=dtype)
    js = np.arange(gw, dtype=dtype)
    x_min = -1.0 + 2.0 * js / gw
    x_ctr = -1.0 + (2.0 * js + 1.0) / gw
    x_max = -1.0 + 2.0 * (js + 1.0) / gw
    iis = np.arange(gh, dtype=dtype)
    y_min = -1.0 + 2.0 * iis / gh
    y_ctr = -1.0 + (2.0 * iis + 1.0) / gh
    y_max = -1.0 + 2.0 * (iis + 1.0) / gh
    out[0] = np.broadcast_to(x_min, (gh, gw))
    out[1] = np.broadcast_to(x_ctr, (gh, gw))
    out[2] = np.broadcast_to(x_max, (gh, gw))
    out[3] = np.broadcast_to(y_min[:, None], (gh, gw))
    out[4] = np.broadcast_to(y_ctr[:, None], (gh, gw))
    out[5] = np.broadcast_to(y_max[:, None], (gh, gw))
    out[6] = 1.0 / gw
    out[7] = 1.0 / gh
    return out


def backbone_encode(images: Tensor, params: ModelParams, config: NetConfig,
                    training: bool) -> Tensor:
    """Downscale images with stacked conv blocks and append location features."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"backbone expects (N,3,H,W), got {images.shape}")
    h, w = images.shape[2], images.shape[3]
    if h % config.backbone_downscale or w % config.backbone_downscale:
        raise ConfigError(
            f"image {h}x{w} not divisible by backbone downscale {config.backbone_downscale}")
    x = images
    for bidx in range(config.backbone_blocks):
        name = f"backbone.{bidx}"
        x = conv2d(x, params.t(f"{name}.conv_w"), stride=BODY_STRIDE, pad=BODY_PAD)
        x = batchnorm2d(x, params.t(f"{name}.bn_gamma"), params.t(f"{name}.bn_beta"),
                        params.bn(f"{name}.bn"), training)
        x = relu(x)
    gh, gw = x.shape[2], x.shape[3]
    loc = build_location_features(gh, gw, dtype=x.dtype)
    loc_batch = Tensor(np.broadcast_to(loc, (x.shape[0],) + loc.shape).copy())
    return concat_channels([x, loc_batch])


def _modulate(x: Tensor, kernel: Tensor, trace: ForwardTrace, branch: str) -> Tensor:
    spatial = kernel.shape[-1]
    g = conv2d_per_sample(x, kernel, stride=1, pad=spatial // 2)
    if branch == "down":
        trace.down_modulations += 1
    else:
        trace.up_modulations += 1
    trace.kernel_spatials.add(spatial)
    return g


def contract_step(down_prev: Tensor, kernel: Tensor | None, params: ModelParams,
                  level: int, training: bool, trace: ForwardTrace) -> Tensor:
    """One contracting module: optional text modulation, then conv-bn-relu
    at stride 2 (spatial halves, channels go to the configured width)."""
    if kernel is None:
        x = down_prev
    else:
        g = _modulate(down_prev, kernel, trace, "down")
        x = concat_channels([down_prev, g])
    name = f"contract.{level}"
    y = conv2d(x, params.t(f"{name}.conv_w"), stride=BODY_STRIDE, pad=BODY_PAD)
    y = batchnorm2d(y, params.t(f"{name}.bn_gamma"), params.t(f"{name}.bn_beta"),
                    params.bn(f"{name}.bn"), training)
    return relu(y)


def expand_step(down_j: Tensor, up_prev: Tensor | None, kernel: Tensor,
                params: ModelParams, level: int, training: bool,
                trace: ForwardTrace) -> Tensor:
    """One expanding module: modulate the same-level contracting output,
    concat with the deeper output (absent at the deepest level), then
    deconv-bn-relu at stride 2 (spatial doubles)."""
    g = _modulate(down_j, kernel, trace, "up")
    x = g if up_prev is None else concat_channels([g, up_prev])
    name = f"expand.{level}"
    y = conv_transpose2d(x, params.t(f"{name}.deconv_w"), stride=BODY_STRIDE,
                         pad=BODY_PAD, out_pad=1)
    y = batchnorm2d(y, params.t(f"{name}.bn_gamma"), params.t(f"{name}.bn_beta"),
                    params.bn(f"{name}.bn"), training)
    return relu(y)


def forward(images: Tensor | np.ndarray, ids: np.ndarray, lengths: np.ndarray,
            params: ModelParams, config: NetConfig, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOutput:
    """Full forward pass for a batch: (N,3,H,W) images and padded token ids.

    Returns the final probability map (N,1,H,W) and one auxiliary
    probability map per expanding level, deepest (smallest) first.
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    h, w = config.image_hw
    if images.shape[2] != h or images.shape[3] != w:
        raise DimensionError(
            f"images are {images.shape[2]}x{images.shape[3]}, config wants {h}x{w}")
    if images.shape[0] != np.asarray(ids).shape[0]:
        raise DimensionError("images and ids disagree on batch size")

    trace = ForwardTrace()
    m = config.depth

    i0 = backbone_encode(images, params, config, training)

    lstm = LstmParams(embedding=params.t("embedding"),
                      w={g: params.t(f"lstm.w_{g}") for g in "ifgo"},
                      u={g: params.t(f"lstm.u_{g}") for g in "ifgo"},
                      b={g: params.t(f"lstm.b_{g}") for g in "ifgo"})
    r = lstm_encode_batch(ids, lengths, lstm)

    plan = config.kernel_plan()
    down_affines = None
    if plan.down is not None:
        down_affines = [(params.t(f"tkd.{i}.w"), params.t(f"tkd.{i}.b"))
                        for i in range(1, m + 1)]
    up_affines = [(params.t(f"tku.{j}.w"), params.t(f"tku.{j}.b"))
                  for j in range(1, m + 1)]
    tk: TextKernels = build_all_kernels(r, down_affines, up_affines, plan,
                                        training=training, rng=rng)

    downs = [i0]
    for i in range(1, m + 1):
        kernel = tk.down[i - 1] if tk.down else None
        downs.append(contract_step(downs[-1], kernel, params, i, training, trace))

    up = None
    aux: list[Tensor] = []
    for j in range(m, 0, -1):
        up = expand_step(downs[j], up, tk.up[j - 1], params, j, training, trace)
        head = conv_transpose2d(up, params.t(f"aux.{j}.deconv_w"), stride=BODY_STRIDE,
                                pad=BODY_PAD, out_pad=1)
        head = head + params.t(f"aux.{j}.deconv_b").reshape(1, 1, 1, 1)
        aux.append(sigmoid(head))

    x = up
    for k in range(config.backbone_blocks):
        name = f"dstack.{k}"
        x = conv_transpose2d(x, params.t(f"{name}.deconv_w"), stride=BODY_STRIDE,
                             pad=BODY_PAD, out_pad=1)
        if k == config.backbone_blocks - 1:
            x = x + params.t(f"{name}.deconv_b").reshape(1, 1, 1, 1)
        else:
            x = batchnorm2d(x, params.t(f"{name}.bn_gamma"), params.t(f"{name}.bn_beta"),
                            params.bn(f"{name}.bn"), training)
            x = relu(x)
    p = sigmoid(x)
    return ForwardOutput(p=p, aux=aux, trace=trace)


def predict_mask(p: Tensor | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize a probability map at the threshold (mask = P >= threshold)."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0,1), got {threshold}")
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return (data >= threshold).astype(np.uint8)


def forward_single(image: np.ndarray, token_ids: list[int], params: ModelParams,
                   config: NetConfig) -> ForwardOutput:
    """Inference convenience wrapper for one (image, expression) pair."""
    images = np.asarray(image)[None]
    ids = np.asarray(token_ids, dtype=np.intp)[None]
    return forward(images, ids, np.array([len(token_ids)]), params, config,
                   training=False)

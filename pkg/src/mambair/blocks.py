"""Restoration network: VSSM, channel attention, RSSB, residual groups and the
three-stage restoration model.

Parameters live in a flat :class:`ModelState` keyed by dotted names such as
``g0.b1.vssm.out_proj.w``; every forward function takes a prefix view of it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .resample import bilinear_upsample_tensor
from .scan2d import init_scan_params, ssm2d_forward
from .ssm import SCAN_IMPLS
from .tensor import (Tensor, as_tensor, conv2d, depthwise_conv2d, gelu, layer_norm, linear, mean, mul,
                     pixel_shuffle, relu, reshape, sigmoid, silu)

TASKS = {"denoise": 1, "sr2": 2, "sr3": 3, "sr4": 4}


@dataclass
class ModelConfig:
    channels: int = 16
    groups: int = 2
    blocks_per_group: int = 2
    state: int = 8
    expand: int = 2
    bottleneck: int = 4
    ca_reduction: int = 16
    task: str = "denoise"
    in_channels: int = 3
    use_local_conv: bool = True
    use_channel_attention: bool = True
    replace_with_mlp: bool = False
    scan_directions: int = 4
    shared_scan_params: bool = False
    scan_impl: str = "fused"
    sr_residual: bool = True  # add the bilinear upsample of the input to SR outputs

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.scan_directions not in (1, 2, 4):
            raise ValueError("scan_directions must be 1, 2 or 4")
        if self.scan_impl not in SCAN_IMPLS:
            raise ValueError(f"scan_impl must be one of {SCAN_IMPLS}")
        for name in ("channels", "groups", "blocks_per_group", "state", "expand", "bottleneck",
                     "ca_reduction", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels % self.bottleneck:
            raise ValueError("channels must be divisible by the bottleneck factor")
        if self.channels % self.ca_reduction:
            raise ValueError("channels must be divisible by the channel-attention reduction")

    @property
    def scale(self) -> int:
        return TASKS[self.task]

    @property
    def inner(self) -> int:
        return self.expand * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class ModelState:
    """Ordered name -> Tensor parameter store for one network."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = dict(params or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __setitem__(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = as_tensor(value)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def sub(self, prefix: str) -> dict[str, Tensor]:
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.params.items() if k.startswith(head)}

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def requires_grad_(self, flag: bool = True) -> "ModelState":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _add_conv(state, rng, name, k, cin, cout):
    state[name + ".w"] = _uniform(rng, (k, k, cin, cout), k * k * cin)
    state[name + ".b"] = np.zeros(cout)


def _add_linear(state, rng, name, cin, cout):
    state[name + ".w"] = _uniform(rng, (cin, cout), cin)
    state[name + ".b"] = np.zeros(cout)


def _add_norm(state, name, c):
    state[name + ".g"] = np.ones(c)
    state[name + ".b"] = np.zeros(c)


def init_state(config: ModelConfig, seed: int = 0, identity_head: bool = False) -> ModelState:
    """Build all parameters for ``config`` from a seeded generator.

    ``identity_head`` zeroes the last convolution so a denoising model starts
    as the exact identity map (through its global residual).
    """
    rng = np.random.default_rng(seed)
    C, Ci, cin = config.channels, config.inner, config.in_channels
    state = ModelState(config)
    _add_conv(state, rng, "conv_first", 3, cin, C)
    for g in range(config.groups):
        for b in range(config.blocks_per_group):
            pre = f"g{g}.b{b}"
            _add_norm(state, pre + ".ln1", C)
            _add_linear(state, rng, pre + ".vssm.in_x", C, Ci)
            _add_linear(state, rng, pre + ".vssm.in_z", C, Ci)
            state[pre + ".vssm.dw.w"] = _uniform(rng, (3, 3, Ci), 9)
            state[pre + ".vssm.dw.b"] = np.zeros(Ci)
            scan = init_scan_params(Ci, config.state, config.scan_directions, rng,
                                    shared=config.shared_scan_params)
            for key, value in scan.items():
                state[f"{pre}.vssm.ssm.{key}"] = value
            _add_norm(state, pre + ".vssm.out_norm", Ci)
            _add_linear(state, rng, pre + ".vssm.out_proj", Ci, C)
            state[pre + ".skip1"] = np.ones(C)
            _add_norm(state, pre + ".ln2", C)
            if config.replace_with_mlp:
                _add_linear(state, rng, pre + ".mlp.fc1", C, 2 * C)
                _add_linear(state, rng, pre + ".mlp.fc2", 2 * C, C)
            else:
                if config.use_local_conv:
                    _add_conv(state, rng, pre + ".conv1", 3, C, C // config.bottleneck)
                    _add_conv(state, rng, pre + ".conv2", 3, C // config.bottleneck, C)
                if config.use_channel_attention:
                    _add_linear(state, rng, pre + ".ca.fc1", C, C // config.ca_reduction)
                    _add_linear(state, rng, pre + ".ca.fc2", C // config.ca_reduction, C)
            state[pre + ".skip2"] = np.ones(C)
        _add_conv(state, rng, f"g{g}.conv", 3, C, C)
    if config.task == "denoise":
        _add_conv(state, rng, "conv_last", 3, C, cin)
    else:
        s = config.scale
        _add_conv(state, rng, "up.conv", 3, C, C)
        _add_conv(state, rng, "up.shuffle", 3, C, s * s * C)
        _add_conv(state, rng, "conv_last", 3, C, cin)
    if identity_head:
        state["conv_last.w"].data[...] = 0.0
        state["conv_last.b"].data[...] = 0.0
    return state


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count; mirrors :func:`init_state`."""
    C, Ci, N, cin = config.channels, config.inner, config.state, config.in_channels
    K = 1 if config.shared_scan_params else config.scan_directions
    conv = lambda cin_, cout: 9 * cin_ * cout + cout  # noqa: E731
    vssm = 2 * (C * Ci + Ci) + 10 * Ci + K * (Ci * Ci + 2 * Ci + 3 * Ci * N) + 2 * Ci + Ci * C + C
    block = 2 * C + vssm + C + 2 * C + C
    if config.replace_with_mlp:
        block += (C * 2 * C + 2 * C) + (2 * C * C + C)
    else:
        if config.use_local_conv:
            block += conv(C, C // config.bottleneck) + conv(C // config.bottleneck, C)
        if config.use_channel_attention:
            h = C // config.ca_reduction
            block += (C * h + h) + (h * C + C)
    total = conv(cin, C) + config.groups * (config.blocks_per_group * block + conv(C, C))
    if config.task == "denoise":
        total += conv(C, cin)
    else:
        total += conv(C, C) + conv(C, config.scale ** 2 * C) + conv(C, cin)
    return total


# ---------------------------------------------------------------------------
# forward passes


def channel_attention(x, weights: Mapping[str, Tensor]) -> Tensor:
    """Squeeze-and-excitation gating: x * sigmoid(fc2(relu(fc1(GAP(x)))))."""
    x = as_tensor(x)
    *lead, H, W, C = x.shape
    if weights["fc1.w"].shape[0] != C:
        raise ValueError(f"channel attention expects {weights['fc1.w'].shape[0]} channels, got {C}")
    pooled = mean(x, axis=(-3, -2))
    hidden = relu(linear(pooled, weights["fc1.w"], weights["fc1.b"]))
    gate = sigmoid(linear(hidden, weights["fc2.w"], weights["fc2.b"]))
    return mul(x, reshape(gate, tuple(lead) + (1, 1, C)))


def vssm_forward(x, weights: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """X_out = Linear(LN(2D-SSM(SiLU(DWConv(Linear(X))))) * SiLU(Linear(X)))."""
    x = as_tensor(x)
    branch = linear(x, weights["in_x.w"], weights["in_x.b"])
    branch = silu(depthwise_conv2d(branch, weights["dw.w"], weights["dw.b"]))
    scan_params = {k[4:]: v for k, v in weights.items() if k.startswith("ssm.")}
    branch = ssm2d_forward(branch, scan_params, config.scan_directions, config.scan_impl)
    x1 = layer_norm(branch, weights["out_norm.g"], weights["out_norm.b"])
    x2 = silu(linear(x, weights["in_z.w"], weights["in_z.b"]))
    return linear(mul(x1, x2), weights["out_proj.w"], weights["out_proj.b"])


def rssb_forward(f, weights: Mapping[str, Tensor], config: ModelConfig, taps: list | None = None) -> Tensor:
    """Residual state-space block.

    Z = VSSM(LN(F)) + s * F ; out = CA(Conv(LN(Z))) + s' * Z, with the
    ablation flags swapping Conv / CA for identities or Conv+CA for an MLP.
    """
    f = as_tensor(f)
    v = vssm_forward(layer_norm(f, weights["ln1.g"], weights["ln1.b"]),
                     {k[5:]: w for k, w in weights.items() if k.startswith("vssm.")}, config)
    if taps is not None:
        taps.append(v)
    z = v + f * weights["skip1"]
    u = layer_norm(z, weights["ln2.g"], weights["ln2.b"])
    if config.replace_with_mlp:
        u = linear(gelu(linear(u, weights["mlp.fc1.w"], weights["mlp.fc1.b"])),
                   weights["mlp.fc2.w"], weights["mlp.fc2.b"])
    else:
        if config.use_local_conv:
            u = conv2d(gelu(conv2d(u, weights["conv1.w"], weights["conv1.b"])),
                       weights["conv2.w"], weights["conv2.b"])
        if config.use_channel_attention:
            u = channel_attention(u, {k[3:]: w for k, w in weights.items() if k.startswith("ca.")})
    return u + z * weights["skip2"]


def rssg_forward(f, state: ModelState, group: int, taps: list | None = None) -> Tensor:
    """A stack of RSSBs closed by a 3x3 conv and a group-level residual."""
    cfg = state.config
    h = as_tensor(f)
    for b in range(cfg.blocks_per_group):
        h = rssb_forward(h, state.sub(f"g{group}.b{b}"), cfg, taps)
    return conv2d(h, state[f"g{group}.conv.w"], state[f"g{group}.conv.b"]) + f


def mambair_forward(image, state: ModelState, config: ModelConfig | None = None,
                    taps: list | None = None) -> Tensor:
    """Shallow conv -> residual groups -> reconstruction head.

    ``image`` is (..., H, W, in_channels). SR tasks return (..., sH, sW, in_channels);
    the denoising head adds the input back and SR heads add its bilinear
    upsample (unless ``sr_residual`` is off). ``taps`` (a list) collects every
    VSSM output in execution order.
    """
    cfg = config or state.config
    image = as_tensor(image)
    if image.ndim < 3 or image.shape[-1] != cfg.in_channels:
        raise ValueError(f"model expects (..., H, W, {cfg.in_channels}) input, got {image.shape}")
    shallow = conv2d(image, state["conv_first.w"], state["conv_first.b"])
    deep = shallow
    for g in range(cfg.groups):
        deep = rssg_forward(deep, state, g, taps)
    fused = deep + shallow
    if cfg.task == "denoise":
        return conv2d(fused, state["conv_last.w"], state["conv_last.b"]) + image
    u = conv2d(fused, state["up.conv.w"], state["up.conv.b"])
    u = pixel_shuffle(conv2d(u, state["up.shuffle.w"], state["up.shuffle.b"]), cfg.scale)
    out = conv2d(u, state["conv_last.w"], state["conv_last.b"])
    if cfg.sr_residual:
        out = out + bilinear_upsample_tensor(image, cfg.scale)
    return out

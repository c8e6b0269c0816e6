"""The four networks: flow generator/discriminator, texture generator/discriminator.

All are spatiotemporal convolution stacks at the canonical clip size of
32 frames x 64 x 64 (configurable through :class:`ArchConfig`):

* flow generator: up-convolution stack from a 100-d Gaussian latent to a
  flow volume, with two heads - a tanh flow head scaled to pixel units and
  a sigmoid mask head. The emitted flow is mask * flow_head; the background
  of a flow field is identically zero, so there is no background stream.
* texture generator: a 3-D U-net over the conditioning flow volume with the
  texture latent broadcast-concatenated at the bottleneck, plus a purely
  2-D background stream from the latent producing a single image that is
  replicated over time. Output = mask * foreground + (1 - mask) * background.
* discriminators: strided 3-D down-convolutions (leaky rectifier on every
  layer, batch normalization on all but the first) collapsing to a feature
  vector, then an affine map squashed to a score in (0, 1). The texture
  discriminator sees the video concatenated with its (normalized) flow
  condition as a 5-channel volume.

Up-sampling convolutions are followed by batch normalization and ReLU
except at the output heads. Flow crosses network boundaries in pixel units;
the fixed ``core.FLOW_SCALE`` divisor maps it into [-1, 1] wherever it
enters a network.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from . import core
from .core import FLOW_SCALE, LATENT_DIM, ShapeError


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 32
    n_levels: int = 4
    video_shape: tuple[int, int, int] = (32, 64, 64)  # (T, H, W)
    latent_dim: int = LATENT_DIM
    skip_levels: tuple[int, ...] | None = None  # None -> all levels below the bottleneck
    leaky_slope: float = 0.2
    feature_dim: int = 128
    channel_cap: int = 256

    def __post_init__(self):
        t, h, w = self.video_shape
        if self.latent_dim != LATENT_DIM:
            raise ValueError(f"latent_dim is fixed at {LATENT_DIM}, got {self.latent_dim}")
        if self.n_levels < 1:
            raise ValueError(f"n_levels must be >= 1, got {self.n_levels}")
        d = 2 ** self.n_levels
        if h % d or w % d or h < d or w < d:
            raise ValueError(f"spatial size ({h}, {w}) must be divisible by 2^n_levels = {d}")
        if t < 2:
            raise ValueError(f"clip length must be >= 2, got {t}")
        tt = t
        for _ in range(self.n_levels):
            if tt >= 4:
                if tt % 2:
                    raise ValueError(f"clip length {t} cannot be halved cleanly at every level")
                tt //= 2
        skips = self.skip_levels
        if skips is None:
            skips = tuple(range(1, self.n_levels))
        skips = tuple(sorted(set(int(k) for k in skips)))
        if any(k < 1 or k >= self.n_levels for k in skips):
            raise ValueError(f"skip levels {skips} must lie in [1, {self.n_levels - 1}]")
        object.__setattr__(self, "skip_levels", skips)

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** (level - 1), self.channel_cap)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["video_shape"] = tuple(d["video_shape"])
        if d.get("skip_levels") is not None:
            d["skip_levels"] = tuple(d["skip_levels"])
        return cls(**d)


def level_conv_args(arch: ArchConfig):
    """(kernel, stride, padding) per level, shallow to deep.

    Spatial extent halves at every level. Temporal extent halves while at
    least 4 frames remain; below that the temporal stride drops to 1 so the
    deepest maps keep 2 frames before the final collapse.
    """
    t = arch.video_shape[0]
    args = []
    for _ in range(arch.n_levels):
        if t >= 4:
            args.append(((4, 4, 4), (2, 2, 2), (1, 1, 1)))
            t //= 2
        else:
            args.append(((3, 4, 4), (1, 2, 2), (1, 1, 1)))
    return args


def bottleneck_shape(arch: ArchConfig):
    """(T, H, W) of the deepest feature map."""
    t, h, w = arch.video_shape
    for _ in range(arch.n_levels):
        if t >= 4:
            t //= 2
    d = 2 ** arch.n_levels
    return (t, h // d, w // d)


def _check_latent(z, arch):
    if z.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise ShapeError(f"latent batch must be [N, {arch.latent_dim}], got {tuple(z.shape)}")


def _check_volume(x, arch, channels, name):
    t, h, w = arch.video_shape
    want = (channels, t, h, w)
    if x.ndim != 5 or tuple(x.shape[1:]) != want:
        raise ShapeError(f"{name} must be [N, {want[0]}, {want[1]}, {want[2]}, {want[3]}], got {tuple(x.shape)}")


class FlowGenerator(nn.Module):
    """Latent -> (flow volume in pixels, mask volume)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        args = level_conv_args(arch)
        t0, h0, w0 = bottleneck_shape(arch)
        n = arch.n_levels
        cdeep = arch.channels(n)

        self.project = nn.ConvTranspose3d(arch.latent_dim, cdeep, (t0, h0, w0))
        self.project_norm = nn.BatchNorm3d(cdeep)
        ups, norms = [], []
        for k in range(n, 1, -1):
            kern, stride, pad = args[k - 1]
            ups.append(nn.ConvTranspose3d(arch.channels(k), arch.channels(k - 1), kern, stride, pad))
            norms.append(nn.BatchNorm3d(arch.channels(k - 1)))
        self.ups = nn.ModuleList(ups)
        self.norms = nn.ModuleList(norms)
        kern, stride, pad = args[0]
        self.flow_head = nn.ConvTranspose3d(arch.channels(1), 2, kern, stride, pad)
        self.mask_head = nn.ConvTranspose3d(arch.channels(1), 1, kern, stride, pad)

    def forward(self, z):
        _check_latent(z, self.arch)
        h = z.view(z.shape[0], self.arch.latent_dim, 1, 1, 1)
        h = torch.relu(self.project_norm(self.project(h)))
        for up, norm in zip(self.ups, self.norms):
            h = torch.relu(norm(up(h)))
        raw_flow = torch.tanh(self.flow_head(h)) * FLOW_SCALE
        mask = torch.sigmoid(self.mask_head(h))
        flow = core.flow_composite(mask, raw_flow)
        return flow, mask


class TextureGenerator(nn.Module):
    """(latent, flow condition) -> (video, mask, background image)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        args = level_conv_args(arch)
        n = arch.n_levels
        t0, h0, w0 = bottleneck_shape(arch)
        skips = set(arch.skip_levels)

        downs, down_norms = [], []
        for k in range(1, n + 1):
            cin = 2 if k == 1 else arch.channels(k - 1)
            kern, stride, pad = args[k - 1]
            downs.append(nn.Conv3d(cin, arch.channels(k), kern, stride, pad))
            down_norms.append(nn.BatchNorm3d(arch.channels(k)) if k > 1 else None)
        self.downs = nn.ModuleList(downs)
        self.down_norms = nn.ModuleList([m for m in down_norms if m is not None])

        self.bottleneck = nn.Conv3d(arch.channels(n) + arch.latent_dim, arch.channels(n), 3, 1, 1)
        self.bottleneck_norm = nn.BatchNorm3d(arch.channels(n))

        ups, up_norms = [], []
        for k in range(n, 1, -1):
            cin = arch.channels(k) * (2 if (k in skips and k < n) else 1)
            kern, stride, pad = args[k - 1]
            ups.append(nn.ConvTranspose3d(cin, arch.channels(k - 1), kern, stride, pad))
            up_norms.append(nn.BatchNorm3d(arch.channels(k - 1)))
        self.ups = nn.ModuleList(ups)
        self.up_norms = nn.ModuleList(up_norms)

        head_in = arch.channels(1) * (2 if 1 in skips else 1)
        kern, stride, pad = args[0]
        self.rgb_head = nn.ConvTranspose3d(head_in, 3, kern, stride, pad)
        self.mask_head = nn.ConvTranspose3d(head_in, 1, kern, stride, pad)

        self.bg_project = nn.ConvTranspose2d(arch.latent_dim, arch.channels(n), (h0, w0))
        self.bg_project_norm = nn.BatchNorm2d(arch.channels(n))
        bg_ups, bg_norms = [], []
        for k in range(n, 1, -1):
            bg_ups.append(nn.ConvTranspose2d(arch.channels(k), arch.channels(k - 1), 4, 2, 1))
            bg_norms.append(nn.BatchNorm2d(arch.channels(k - 1)))
        self.bg_ups = nn.ModuleList(bg_ups)
        self.bg_norms = nn.ModuleList(bg_norms)
        self.bg_head = nn.ConvTranspose2d(arch.channels(1), 3, 4, 2, 1)

    def forward(self, z, condition_flow):
        arch = self.arch
        _check_latent(z, arch)
        _check_volume(condition_flow, arch, 2, "condition_flow")
        slope = arch.leaky_slope
        n = arch.n_levels
        skips = set(arch.skip_levels)

        h = condition_flow / FLOW_SCALE
        encoded = []
        norm_i = 0
        for k, down in enumerate(self.downs, start=1):
            h = down(h)
            if k > 1:
                h = self.down_norms[norm_i](h)
                norm_i += 1
            h = torch.nn.functional.leaky_relu(h, slope)
            encoded.append(h)

        zmap = z.view(z.shape[0], arch.latent_dim, 1, 1, 1).expand(
            z.shape[0], arch.latent_dim, *encoded[-1].shape[2:])
        d = torch.relu(self.bottleneck_norm(self.bottleneck(torch.cat([encoded[-1], zmap], dim=1))))

        for i, (up, norm) in enumerate(zip(self.ups, self.up_norms)):
            d = torch.relu(norm(up(d)))
            k = n - 1 - i  # level of the map just produced
            if k in skips:
                d = torch.cat([d, encoded[k - 1]], dim=1)

        foreground = torch.tanh(self.rgb_head(d))
        mask = torch.sigmoid(self.mask_head(d))

        b = torch.relu(self.bg_project_norm(self.bg_project(z.view(z.shape[0], arch.latent_dim, 1, 1))))
        for up, norm in zip(self.bg_ups, self.bg_norms):
            b = torch.relu(norm(up(b)))
        background = torch.tanh(self.bg_head(b))

        bg_video = core.replicate_background(background, arch.video_shape[0], axis=2)
        video = core.composite(mask, foreground, bg_video)
        return video, mask, background


class _VolumeDiscriminator(nn.Module):
    """Shared down-convolution trunk ending in (score, last-layer features)."""

    def __init__(self, arch: ArchConfig, in_channels: int):
        super().__init__()
        self.arch = arch
        self.in_channels = in_channels
        args = level_conv_args(arch)
        n = arch.n_levels
        downs, norms = [], []
        for k in range(1, n + 1):
            cin = in_channels if k == 1 else arch.channels(k - 1)
            kern, stride, pad = args[k - 1]
            downs.append(nn.Conv3d(cin, arch.channels(k), kern, stride, pad))
            norms.append(nn.BatchNorm3d(arch.channels(k)) if k > 1 else None)
        self.downs = nn.ModuleList(downs)
        self.norms = nn.ModuleList([m for m in norms if m is not None])
        self.collapse = nn.Conv3d(arch.channels(n), arch.feature_dim, bottleneck_shape(arch))
        self.score_head = nn.Linear(arch.feature_dim, 1)

    def _trunk(self, x):
        slope = self.arch.leaky_slope
        norm_i = 0
        for k, down in enumerate(self.downs, start=1):
            x = down(x)
            if k > 1:
                x = self.norms[norm_i](x)
                norm_i += 1
            x = torch.nn.functional.leaky_relu(x, slope)
        feats = torch.nn.functional.leaky_relu(self.collapse(x), slope).flatten(1)
        score = torch.sigmoid(self.score_head(feats)).squeeze(1)
        return score, feats


class FlowDiscriminator(_VolumeDiscriminator):
    def __init__(self, arch: ArchConfig):
        super().__init__(arch, in_channels=2)

    def forward(self, flow):
        _check_volume(flow, self.arch, 2, "flow")
        return self._trunk(flow / FLOW_SCALE)


class TextureDiscriminator(_VolumeDiscriminator):
    def __init__(self, arch: ArchConfig):
        super().__init__(arch, in_channels=5)

    def forward(self, video, condition_flow):
        _check_volume(video, self.arch, 3, "video")
        _check_volume(condition_flow, self.arch, 2, "condition_flow")
        return self._trunk(torch.cat([video, condition_flow / FLOW_SCALE], dim=1))


NETWORK_NAMES = ("flow_generator", "flow_discriminator", "texture_generator", "texture_discriminator")

_BUILDERS = {
    "flow_generator": FlowGenerator,
    "flow_discriminator": FlowDiscriminator,
    "texture_generator": TextureGenerator,
    "texture_discriminator": TextureDiscriminator,
}


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic initialization: conv/affine weights ~ N(0, 0.02), biases 0,
    normalization scale 1 / shift 0. The same seed always yields the same bytes."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d, nn.Linear)):
            w = rng.standard_normal(tuple(m.weight.shape)) * 0.02
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
            m.reset_running_stats()
    return module


def build_network(name: str, arch: ArchConfig, seed: int) -> nn.Module:
    if name not in _BUILDERS:
        raise KeyError(f"unknown network {name!r}, expected one of {NETWORK_NAMES}")
    return init_weights(_BUILDERS[name](arch), seed)


def build_networks(arch: ArchConfig, seed: int) -> dict:
    """All four networks with per-network seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(len(NETWORK_NAMES))
    return {name: build_network(name, arch, int(s)) for name, s in zip(NETWORK_NAMES, seeds)}


def parameter_gradients(loss: torch.Tensor, module: nn.Module, retain_graph=False) -> dict:
    """Gradients of ``loss`` w.r.t. every named parameter of ``module``.

    Parameters the loss does not reach get zero gradients. Raises if the
    loss tensor is not connected to a forward computation.
    """
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise RuntimeError("loss is not the result of a forward computation; nothing to differentiate")
    names, params = zip(*module.named_parameters())
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p))
            for n, p, g in zip(names, params, grads)}


def state_tensors(module: nn.Module, prefix: str) -> dict:
    """Flatten a module's state dict under ``prefix.`` for checkpointing."""
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_state_tensors(module: nn.Module, tensors: dict, prefix: str):
    """Restore a module from checkpoint tensors; names must match exactly."""
    from .fileio import UnknownTensorError

    want = set(module.state_dict().keys())
    got = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    unknown = set(got) - want
    missing = want - set(got)
    if unknown:
        raise UnknownTensorError(f"checkpoint holds tensors {sorted(unknown)} unknown to {prefix}")
    if missing:
        raise UnknownTensorError(f"checkpoint is missing tensors {sorted(missing)} for {prefix}")
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in got.items()}
    module.load_state_dict(state)
    return module


def restore_networks(checkpoint, names=None) -> dict:
    """Rebuild the networks stored in a checkpoint (all of them by default)."""
    arch = ArchConfig.from_dict(checkpoint.manifest["arch"])
    prefixes = sorted({k.split(".", 1)[0] for k in checkpoint.tensors})
    if names is None:
        names = [p for p in NETWORK_NAMES if p in prefixes]
    nets = {}
    for name in names:
        if name not in prefixes:
            raise KeyError(f"checkpoint has no tensors for {name!r} (found {prefixes})")
        net = _BUILDERS[name](arch)
        load_state_tensors(net, checkpoint.tensors, name)
        nets[name] = net
    return nets


def to_torch(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Channel-last numpy volume [..., T, H, W, C] -> channel-first torch [..., C, T, H, W]."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, -4))).to(dtype)


def from_torch(t: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_torch`."""
    return np.moveaxis(t.detach().cpu().numpy(), -4, -1)


def image_to_torch(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, -3))).to(dtype)


def image_from_torch(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().numpy(), -3, -1)

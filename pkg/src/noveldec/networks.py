"""Decoder, encoder and mutual-information estimator heads.

Both image networks follow the DCGAN layout: three stride-2 blocks between
``image_size / 8`` and ``image_size``. With the default widths a 3x32x32
input gives an 8x8x256 local feature map and a 128-d global latent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .exceptions import ConfigError, ShapeError


@dataclass(frozen=True)
class ArchConfig:
    latent_dim: int = 128
    image_size: int = 32
    channels: int = 3
    base_width: int = 64
    tap_block: int = 2  # encoder block whose output is the local feature map
    head_hidden: int = 512
    prior_hidden: tuple = (1000, 200)
    use_prior_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "prior_hidden", tuple(int(h) for h in self.prior_hidden))
        if self.image_size % 8 or self.image_size < 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.latent_dim < 1 or self.base_width < 1 or self.head_hidden < 1:
            raise ConfigError("latent_dim, base_width and head_hidden must be positive")
        if self.tap_block not in (1, 2, 3):
            raise ConfigError("tap_block must be 1, 2 or 3")

    @property
    def image_shape(self):
        return (self.channels, self.image_size, self.image_size)

    @property
    def feature_shape(self):
        """(S, H, W) of the local feature map."""
        size = self.image_size // 2**self.tap_block
        return (self.base_width * 2**self.tap_block, size, size)

    def to_dict(self):
        d = asdict(self)
        d["prior_hidden"] = list(self.prior_hidden)
        return d


class FeaturePack(NamedTuple):
    """Encoder output. ``z`` is the deterministic global latent (equal to ``mu``)."""

    A: torch.Tensor
    z: torch.Tensor
    mu: torch.Tensor
    logvar: torch.Tensor


def _check_trailing(t, shape, what):
    if tuple(t.shape[-len(shape):]) != tuple(shape) or t.ndim != len(shape) + 1:
        raise ShapeError(f"{what}: expected (B, {', '.join(map(str, shape))}), got {tuple(t.shape)}")


class Decoder(nn.Module):
    """Latent code -> image in [-1, 1]."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        self.start = cfg.image_size // 8
        self.project = nn.Sequential(
            nn.Linear(cfg.latent_dim, 8 * b * self.start**2, bias=False),
            nn.BatchNorm1d(8 * b * self.start**2),
            nn.ReLU(True),
        )
        self.blocks = nn.Sequential(
            nn.ConvTranspose2d(8 * b, 4 * b, 4, 2, 1, bias=False),
            nn.BatchNorm2d(4 * b),
            nn.ReLU(True),
            nn.ConvTranspose2d(4 * b, 2 * b, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * b),
            nn.ReLU(True),
            nn.ConvTranspose2d(2 * b, cfg.channels, 4, 2, 1),
            nn.Tanh(),
        )

    def forward(self, z):
        _check_trailing(z, (self.cfg.latent_dim,), "decoder input")
        h = self.project(z).view(len(z), 8 * self.cfg.base_width, self.start, self.start)
        return self.blocks(h)


class Encoder(nn.Module):
    """Image -> (local feature map, global latent, log-variance)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        widths = [cfg.channels, 2 * b, 4 * b, 8 * b]
        blocks = []
        for i in range(3):
            layers = [nn.Conv2d(widths[i], widths[i + 1], 4, 2, 1, bias=i == 0)]
            if i > 0:
                layers.append(nn.BatchNorm2d(widths[i + 1]))
            layers.append(nn.LeakyReLU(0.2, True))
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        cells = (cfg.image_size // 8) ** 2
        self.flat_scale = cells**-0.5
        self.mu = nn.Linear(8 * b * cells, cfg.latent_dim)
        self.logvar = nn.Linear(8 * b * cells, cfg.latent_dim)

    def features(self, x):
        """Run only the layers up to the tap block (the feature-extraction subset)."""
        _check_trailing(x, self.cfg.image_shape, "encoder input")
        h = x
        for block in self.blocks[: self.cfg.tap_block]:
            h = block(h)
        return h

    def forward(self, x) -> FeaturePack:
        _check_trailing(x, self.cfg.image_shape, "encoder input")
        h, A = x, None
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i == self.cfg.tap_block:
                A = h
        # 1/sqrt(cells) keeps the squared latent loss inside plain SGD's stable step size
        h = h.flatten(1) * self.flat_scale
        mu = self.mu(h)
        return FeaturePack(A=A, z=mu, mu=mu, logvar=self.logvar(h))


class GlobalEstimator(nn.Module):
    """Scores a (feature map, latent) pair with one pre-sigmoid scalar.

    The feature map is average-pooled and linearly mapped to ``latent_dim``
    before concatenation with ``z``.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.feature_shape[0]
        d, hidden = cfg.latent_dim, cfg.head_hidden
        self.downscale = nn.Linear(s, d)
        self.net = nn.Sequential(
            nn.Linear(2 * d, hidden),
            nn.ReLU(True),
            nn.Linear(hidden, hidden),
            nn.ReLU(True),
            nn.Linear(hidden, 1),
        )

    def forward(self, A, z, drop_z=False):
        _check_trailing(A, self.cfg.feature_shape, "global estimator feature map")
        _check_trailing(z, (self.cfg.latent_dim,), "global estimator latent")
        a_z = self.downscale(A.mean(dim=(2, 3)))
        if drop_z:
            z = torch.zeros_like(z)
        return self.net(torch.cat([a_z, z], dim=1)).squeeze(1)


class LocalEstimator(nn.Module):
    """1x1 convolutional scorer: one pre-sigmoid score per feature-map location."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.feature_shape[0]
        hidden = cfg.head_hidden
        self.net = nn.Sequential(
            nn.Conv2d(s + cfg.latent_dim, hidden, 1),
            nn.ReLU(True),
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(True),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, A, z, drop_zA=False):
        if A.ndim != 4 or A.shape[1] != self.cfg.feature_shape[0]:
            raise ShapeError(f"local estimator feature map: bad shape {tuple(A.shape)}")
        _check_trailing(z, (self.cfg.latent_dim,), "local estimator latent")
        z_A = z[:, :, None, None].expand(-1, -1, A.shape[2], A.shape[3])
        if drop_zA:
            z_A = torch.zeros_like(z_A)
        return self.net(torch.cat([A, z_A], dim=1)).squeeze(1)


class PriorEstimator(nn.Module):
    """Refines the encoder's log-variance from the global latent.

    The last layer starts at zero, so an untrained head passes the encoder's
    (mu, logvar) through unchanged. The mean is never modified: a head free
    to shift it could cancel the prior penalty without regularizing ``z``.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        d = cfg.latent_dim
        h1, h2 = cfg.prior_hidden
        self.net = nn.Sequential(
            nn.Linear(d, h1),
            nn.ReLU(True),
            nn.Linear(h1, h2),
            nn.ReLU(True),
            nn.Linear(h2, d),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, mu, logvar):
        return mu, logvar + self.net(mu)


def _dcgan_init(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class DecoderEncoder(nn.Module):
    """Container for every network; parameter names double as checkpoint keys."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.decoder = Decoder(cfg)
        self.encoder = Encoder(cfg)
        self.decoder.apply(_dcgan_init)
        self.encoder.apply(_dcgan_init)
        self.global_head = GlobalEstimator(cfg)
        self.local_head = LocalEstimator(cfg)
        self.prior_head = PriorEstimator(cfg)

    def prior_params(self, mu, logvar):
        if self.cfg.use_prior_head:
            return self.prior_head(mu, logvar)
        return mu, logvar

    @torch.no_grad()
    def reconstruct(self, x):
        """encode -> decode, the inference path used for scoring."""
        return self.decoder(self.encoder(x).z)


# functional entry points --------------------------------------------------


def decode(z, decoder: Decoder):
    """Decode a single code (d,) or a batch (B, d)."""
    if z.ndim == 1:
        return decoder(z[None])[0]
    return decoder(z)


def encode(x, encoder: Encoder) -> FeaturePack:
    """Encode a single image (C, H, W) or a batch (B, C, H, W)."""
    if x.ndim == 3:
        pack = encoder(x[None])
        return FeaturePack(*(t[0] for t in pack))
    return encoder(x)


def global_score(A, z, head: GlobalEstimator, drop_z=False):
    if A.ndim == 3:
        return head(A[None], z[None], drop_z=drop_z)[0]
    return head(A, z, drop_z=drop_z)


def local_score_map(A, z, head: LocalEstimator, drop_zA=False):
    if A.ndim == 3:
        return head(A[None], z[None], drop_zA=drop_zA)[0]
    return head(A, z, drop_zA=drop_zA)

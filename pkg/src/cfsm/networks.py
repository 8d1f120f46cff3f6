"""Generator (encoder / AdaIN decoder / style MLP), multi-scale discriminator,
and the small embedding network used for recognition.

Channel plan follows the usual translation generator layout: widths
``w, 2w, 4w`` in the encoder, four residual blocks on the ``4w`` content
tensor, and four AdaIN residual blocks plus two upsampling convs in the
decoder.  ``width=64`` gives the 64/128/256 plan.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .subspace import StyleSubspace, to_style_code

ADAIN_EPS = 1e-5


def adain(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Adaptive instance norm.

    ``gamma``/``beta`` are either per-channel (C,) or per-sample (B, C).
    """
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("AdaIN needs at least two spatial positions")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    xn = (x - mean) / torch.sqrt(var + eps)
    if gamma.ndim == 1:
        gamma, beta = gamma[None], beta[None]
    return xn * gamma[:, :, None, None] + beta[:, :, None, None]


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(dim, affine=False)
        self.norm2 = nn.InstanceNorm2d(dim, affine=False)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class AdaINResBlock(nn.Module):
    """Residual block whose two norm layers take external (gamma, beta)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(dim, dim, 3, 1, 1, padding_mode="reflect")

    def forward(self, x, styles):
        (g1, b1), (g2, b2) = styles
        h = F.relu(adain(self.conv1(x), g1, b1))
        return x + adain(self.conv2(h), g2, b2)


class Encoder(nn.Module):
    def __init__(self, in_ch: int = 3, width: int = 64, n_res: int = 4):
        super().__init__()
        w = width
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, w, 7, 1, 3, padding_mode="reflect"), nn.InstanceNorm2d(w), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 4, 2, 1, padding_mode="reflect"), nn.InstanceNorm2d(2 * w), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1, padding_mode="reflect"), nn.InstanceNorm2d(4 * w), nn.ReLU(),
        )
        self.res = nn.Sequential(*[ResBlock(4 * w) for _ in range(n_res)])
        self.out_channels = 4 * w

    def forward(self, x):
        return self.res(self.stem(x))


class Decoder(nn.Module):
    def __init__(self, out_ch: int = 3, width: int = 64, n_res: int = 4):
        super().__init__()
        w = width
        self.blocks = nn.ModuleList([AdaINResBlock(4 * w) for _ in range(n_res)])
        self.conv1 = nn.Conv2d(4 * w, 2 * w, 5, 1, 2, padding_mode="reflect")
        self.conv2 = nn.Conv2d(2 * w, w, 5, 1, 2, padding_mode="reflect")
        self.conv_out = nn.Conv2d(w, out_ch, 7, 1, 3, padding_mode="reflect")

    @property
    def adain_layout(self) -> list[int]:
        """Channel count of every AdaIN layer, in consumption order."""
        return [blk.dim for blk in self.blocks for _ in range(2)]

    def split_adain(self, params: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Slice a (B, sum 2C) vector into per-layer (gamma, beta) pairs."""
        out, pos = [], 0
        for c in self.adain_layout:
            gamma_hat = params[..., pos:pos + c]
            beta = params[..., pos + c:pos + 2 * c]
            out.append((1.0 + gamma_hat, beta))
            pos += 2 * c
        if pos != params.shape[-1]:
            raise ValueError(f"AdaIN parameter vector has length {params.shape[-1]}, expected {pos}")
        return out

    def forward(self, content, adain_params):
        styles = self.split_adain(adain_params)
        x = content
        for i, blk in enumerate(self.blocks):
            x = blk(x, styles[2 * i:2 * i + 2])
        x = F.relu(self.conv1(F.interpolate(x, scale_factor=2, mode="nearest")))
        x = F.relu(self.conv2(F.interpolate(x, scale_factor=2, mode="nearest")))
        return torch.tanh(self.conv_out(x))


class StyleMLP(nn.Module):
    """d -> 256 -> 256 -> concatenated (gamma_hat, beta) for every AdaIN layer."""

    def __init__(self, d: int, out_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, z):
        return self.net(z)


class SynthesisModel(nn.Module):
    """E, G, MLP and the style subspace. X_hat = G(E(X), MLP(U o + mu))."""

    def __init__(self, d: int = 128, q: int = 10, width: int = 64, channels: int = 3,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.enc = Encoder(channels, width)
        self.dec = Decoder(channels, width)
        self.mlp = StyleMLP(d, 2 * sum(self.dec.adain_layout))
        self.style = StyleSubspace(d, q, generator=generator)

    @property
    def q(self) -> int:
        return self.style.q

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"image size {tuple(x.shape[2:])} not divisible by 4")
        return self.enc(x)

    def map_style(self, z: torch.Tensor) -> torch.Tensor:
        return self.mlp(z)

    def decode(self, content: torch.Tensor, adain_params: torch.Tensor) -> torch.Tensor:
        return self.dec(content, adain_params)

    def synthesize(self, x: torch.Tensor, o: torch.Tensor, content: torch.Tensor | None = None) -> torch.Tensor:
        """``o`` is (q,) or (B, q). Pass ``content`` to reuse an encoding."""
        if content is None:
            content = self.encode(x)
        z = to_style_code(self.style, o)
        if z.ndim == 1:
            z = z.expand(x.shape[0], -1)
        return self.decode(content, self.map_style(z))

    def forward(self, x, o):
        return self.synthesize(x, o)


class PatchDiscriminator(nn.Module):
    """Three strided 4x4 convs and a 1x1 logit conv."""

    def __init__(self, in_ch: int = 3, width: int = 64):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 1, 1, 0),
        )

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, in_ch: int = 3, width: int = 64, num_scales: int = 3):
        super().__init__()
        self.heads = nn.ModuleDict({f"k{k}": PatchDiscriminator(in_ch, width) for k in range(num_scales)})

    def forward(self, x) -> list[torch.Tensor]:
        outs = []
        for k, head in enumerate(self.heads.values()):
            xs = F.avg_pool2d(x, 2 ** k) if k else x
            outs.append(head(xs))
        return outs


class EmbeddingNet(nn.Module):
    """Four conv blocks, global average pool, linear projection to ``dim``."""

    def __init__(self, dim: int = 128, channels: int = 3, width: int = 32):
        super().__init__()
        w = width
        plan = [channels, w, 2 * w, 4 * w, 4 * w]
        layers = []
        for cin, cout in zip(plan[:-1], plan[1:]):
            layers += [nn.Conv2d(cin, cout, 3, 1, 1), nn.GroupNorm(8, cout), nn.ReLU(), nn.AvgPool2d(2)]
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(4 * w, dim)
        self.dim = dim

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.proj(h)


class CFSM(nn.Module):
    """Everything stage-1 trains or needs, under the checkpoint prefixes
    ``enc.``, ``dec.``, ``mlp.``, ``style.``, ``disc.`` and ``idnet.`` (frozen f)."""

    def __init__(self, d: int = 128, q: int = 10, width: int = 64, disc_width: int = 64,
                 embedding_dim: int = 128, channels: int = 3, generator: torch.Generator | None = None):
        super().__init__()
        self.synth = SynthesisModel(d, q, width, channels, generator=generator)
        self.disc = MultiScaleDiscriminator(channels, disc_width)
        self.idnet = EmbeddingNet(embedding_dim, channels)

    # flatten names so checkpoints read enc.*, dec.* ... rather than synth.enc.*
    def flat_state(self) -> dict[str, torch.Tensor]:
        out = {}
        for k, v in self.state_dict().items():
            out[k[len("synth."):] if k.startswith("synth.") else k.replace("disc.heads.", "disc.", 1)] = v
        return out

    def load_flat_state(self, tensors: dict[str, torch.Tensor]):
        sd = {}
        for k, v in tensors.items():
            if k.startswith(("enc.", "dec.", "mlp.", "style.")):
                sd["synth." + k] = v
            elif k.startswith("disc."):
                sd["disc.heads." + k[len("disc."):]] = v
            else:
                sd[k] = v
        self.load_state_dict(sd, strict=True)

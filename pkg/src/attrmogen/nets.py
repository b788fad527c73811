"""Small 1-D convolutional building blocks shared by the encoder, decoder and classifiers.

Tensors follow the ``(batch, time, channels)`` convention at module boundaries.
"""
from __future__ import annotations

import math

from torch import nn


class ResBlock1d(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReLU(),
            nn.Conv1d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(width, width, 1),
        )

    def forward(self, x):
        return x + self.body(x)


def n_stages(downsample_factor: int) -> int:
    stages = int(round(math.log2(downsample_factor))) if downsample_factor >= 1 else -1
    if stages < 0 or 2**stages != downsample_factor:
        raise ValueError(f"downsample factor must be a power of two, got {downsample_factor}")
    return stages


class ConvTrunk(nn.Module):
    """Conv stem, ``log2(downsample)`` strided stages, residual blocks.

    Maps ``(B, L, in_ch)`` to ``(B, L / downsample, width)``.
    """

    def __init__(self, in_ch: int, width: int, downsample: int = 1, depth: int = 1):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv1d(in_ch, width, 3, padding=1), nn.ReLU()]
        for _ in range(n_stages(downsample)):
            layers.append(nn.Conv1d(width, width, 4, stride=2, padding=1))
            layers.extend(ResBlock1d(width) for _ in range(depth))
        if n_stages(downsample) == 0:
            layers.extend(ResBlock1d(width) for _ in range(depth))
        self.net = nn.Sequential(*layers)
        self.downsample = downsample

    def forward(self, x):
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class UpTrunk(nn.Module):
    """Mirror of ``ConvTrunk``: transposed convolutions double the length per stage."""

    def __init__(self, in_ch: int, width: int, out_ch: int, upsample: int, depth: int = 1):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv1d(in_ch, width, 3, padding=1)]
        for _ in range(n_stages(upsample)):
            layers.extend(ResBlock1d(width) for _ in range(depth))
            layers.append(nn.ConvTranspose1d(width, width, 4, stride=2, padding=1))
        layers.extend([nn.ReLU(), nn.Conv1d(width, width, 3, padding=1), nn.ReLU(), nn.Conv1d(width, out_ch, 3, padding=1)])
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.transpose(1, 2)).transpose(1, 2)


def param_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

"""Numpy frame pipeline: bits -> polar encoder -> mapper -> channel -> splitter.

On the receive side it produces demapper LLRs for the decoder and the
harvested power of every frame.  Decoders are applied by the caller so that
several of them can be compared on the same noise draws.
"""

from dataclasses import dataclass

import numpy as np

from .decoders import LLR_MAX
from .errors import ConfigError
from .modem import ConstellationSet, exact_llr_demap, symbol_indices
from .phy import ChannelSpec, PowerSplit, channel_apply, power_split
from .polar import place_bits, polar_encode

NOISE_PLACEMENTS = ("receiver", "channel")
NOISELESS_VAR = 1e-12   # stands in for a zero noise variance in the exact demapper


@dataclass
class FrameBatch:
    info_bits: np.ndarray   # (B, K)
    llrs: np.ndarray        # (B, N)
    p_out: np.ndarray       # (B,) mW
    p_in: np.ndarray        # (B,) mW


def equalize(info, h):
    """Zero-forcing equalization used in front of a learned demapper."""
    return info * np.conj(h) / np.abs(h) ** 2


class Link:
    """One configured transmit/receive chain.

    ``noise_placement="receiver"`` adds the noise power ``noise_mw`` on the
    information branch after the splitter, so the branch SNR is
    ``rho * P_tr / P_n``.  ``"channel"`` adds it before the splitter as
    ``n0``; ``conv_noise_mw`` is the extra baseband conversion noise.
    """

    def __init__(self, mask, constellation, tx_mw, noise_mw, rho, harvester,
                 channel="awgn", noise_placement="receiver", conv_noise_mw=0.0,
                 demapper=None, gamma=None, llr_max=LLR_MAX):
        if noise_placement not in NOISE_PLACEMENTS:
            raise ConfigError(f"noise placement must be one of {NOISE_PLACEMENTS}")
        self.mask = np.asarray(mask, dtype=bool)
        if not isinstance(constellation, ConstellationSet):
            raise ConfigError("constellation must be a ConstellationSet")
        if not np.isclose(constellation.mean_power, tx_mw, rtol=1e-9):
            raise ConfigError("constellation power differs from the transmit power")
        self.constellation = constellation
        self.tx_mw = float(tx_mw)
        self.noise_mw = float(noise_mw)
        self.rho = float(rho)
        self.harvester = harvester
        self.placement = noise_placement
        self.channel = ChannelSpec(channel, noise_mw if noise_placement == "channel" else 0.0)
        branch_noise = conv_noise_mw + (noise_mw if noise_placement == "receiver" else 0.0)
        self.split = PowerSplit.from_rho(self.rho, branch_noise)
        if noise_mw < 0:
            raise ConfigError("noise power must be non-negative")
        if demapper is not None and noise_mw == 0 and gamma is None:
            raise ConfigError("a learned demapper needs a finite SNR")
        self.demapper = demapper
        self.gamma = gamma if gamma is not None else (tx_mw / noise_mw if noise_mw > 0 else np.inf)
        self.llr_max = llr_max

    @property
    def n_bits(self):
        return self.mask.size

    @property
    def branch_noise_var(self):
        pre = self.channel.noise_power * self.rho
        return pre + self.split.conv_noise_var

    def frames(self, rng, count):
        """Simulate ``count`` frames with draws taken from ``rng`` in a fixed order."""
        k = int(self.mask.sum())
        b = rng.integers(0, 2, size=(count, k), dtype=np.uint8)
        c = polar_encode(place_bits(b, self.mask))
        x = self.constellation.complex[symbol_indices(c, self.constellation.order)]
        y, h = channel_apply(x, self.channel, rng)
        info, p_in = power_split(y, self.split, rng)
        if self.demapper is None:
            gain = None if self.channel.kind == "awgn" else h
            llrs = exact_llr_demap(info, self.constellation,
                                   max(self.branch_noise_var, NOISELESS_VAR),
                                   self.rho, gain, self.llr_max)
        else:
            z = info if self.channel.kind == "awgn" else equalize(info, h)
            llrs = np.clip(self.demapper.forward(z, self.gamma).value, -self.llr_max, self.llr_max)
        p_out = np.asarray(self.harvester(p_in), dtype=float)
        return FrameBatch(b, llrs, p_out, p_in)


"""Polar code construction and encoding.

Bit order is natural (no bit reversal): ``c = u @ F^{(x)n}`` with
``F = [[1, 0], [1, 1]]``.  A frozen mask is a boolean array where ``True``
marks an information position and ``False`` a frozen one.
"""

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
import math

import numpy as np

from .errors import ConfigError, InvalidInputError, UnsupportedLengthError

PW_BETA = 2.0 ** 0.25


def log2_exact(n):
    """Return ``log2(n)`` for a power of two ``n >= 2``, else raise."""
    n = int(n)
    if n < 2 or n & (n - 1):
        raise ConfigError(f"code length must be a power of two >= 2, got {n}")
    return n.bit_length() - 1


@dataclass(frozen=True)
class CodeConfig:
    """Identity of a polar code: length, target dimension and frozen mask."""

    n_bits: int
    k_info: int
    frozen_mask: np.ndarray

    def __post_init__(self):
        log2_exact(self.n_bits)
        mask = np.asarray(self.frozen_mask, dtype=bool)
        if mask.shape != (self.n_bits,):
            raise ConfigError(f"mask shape {mask.shape} != ({self.n_bits},)")
        if not 0 <= self.k_info <= self.n_bits:
            raise ConfigError(f"K={self.k_info} outside [0, {self.n_bits}]")
        mask.setflags(write=False)
        object.__setattr__(self, "frozen_mask", mask)

    @property
    def stages(self):
        return log2_exact(self.n_bits)

    @property
    def info_positions(self):
        return np.flatnonzero(self.frozen_mask)

    @property
    def rate(self):
        return self.k_info / self.n_bits

    def check_test_time(self):
        """At test time exactly K positions carry information."""
        if int(self.frozen_mask.sum()) != self.k_info:
            raise ConfigError(
                f"mask has {int(self.frozen_mask.sum())} info flags, expected {self.k_info}"
            )


def polar_encode(u):
    """Encode ``u`` (shape ``(..., N)``) with the in-place butterfly.

    Uses ``N log2 N / 2`` XORs per block.
    """
    c = np.array(u, dtype=np.uint8, copy=True)
    n = c.shape[-1]
    log2_exact(n)
    span = n // 2
    while span >= 1:
        blocks = c.reshape(c.shape[:-1] + (n // (2 * span), 2, span))
        blocks[..., 0, :] ^= blocks[..., 1, :]
        span //= 2
    return c


def place_bits(b, mask):
    """Scatter the information bits ``b`` into the info positions of ``mask``.

    Frozen positions are zero.  ``b`` may carry leading batch dimensions.
    """
    mask = np.asarray(mask, dtype=bool)
    b = np.asarray(b, dtype=np.uint8)
    k = int(mask.sum())
    if b.shape[-1] != k:
        raise InvalidInputError(f"got {b.shape[-1]} bits for {k} info positions")
    u = np.zeros(b.shape[:-1] + mask.shape, dtype=np.uint8)
    u[..., mask] = b
    return u


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def bnn_binarize(f_pro, p_u):
    """Stochastic info/frozen selection: info where ``f_pro > p_u``.

    Equality yields frozen.  The backward pass of the differentiable version
    (``autodiff.ste_binarize``) is the identity.
    """
    f_pro = np.asarray(f_pro, dtype=float)
    p_u = np.asarray(p_u, dtype=float)
    if f_pro.shape[-1] != p_u.shape[-1]:
        raise InvalidInputError(f"length mismatch {f_pro.shape} vs {p_u.shape}")
    return f_pro > p_u


def select_top_k(f_soft, k):
    """Info flags at the ``k`` largest entries; ties go to the lower index."""
    f_soft = np.asarray(f_soft, dtype=float)
    n = f_soft.shape[0]
    if not 0 <= k <= n:
        raise ConfigError(f"K={k} outside [0, {n}]")
    order = np.argsort(-f_soft, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def rate_of(f_soft):
    """Average code rate implied by the selection logits."""
    return float(np.mean(sigmoid(f_soft)))


def _top_k_by(score, k, prefer_high_index=False):
    n = score.shape[0]
    if not 0 <= k <= n:
        raise ConfigError(f"K={k} outside [0, {n}]")
    idx = np.arange(n)
    if prefer_high_index:
        order = np.lexsort((-idx, -score))
    else:
        order = np.lexsort((idx, -score))
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


# Chung's two-segment approximation of the GA phi function.
_PHI_A, _PHI_B, _PHI_C = 0.4527, 0.86, 0.0218
_PHI_SPLIT = 10.0


def _log_phi(x):
    if x <= 0:
        return 0.0
    if x < _PHI_SPLIT:
        return -_PHI_A * x ** _PHI_B + _PHI_C
    return 0.5 * math.log(math.pi / x) - x / 4.0 + math.log1p(-10.0 / (7.0 * x))


def _phi_inv_from_log(log_target):
    """Invert ``log phi`` by bisection; ``log phi`` is decreasing on (0, inf)."""
    if log_target >= 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while _log_phi(hi) > log_target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _log_phi(mid) > log_target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def _ga_check(mu):
    # 1 - (1 - phi)^2 == phi * (2 - phi), kept in log domain for tiny phi
    lp = _log_phi(mu)
    phi = math.exp(lp)
    return _phi_inv_from_log(lp + math.log(2.0 - phi))


def ga_mean_llrs(n_bits, design_snr_db):
    """Mean LLR of every synthesized channel under Gaussian approximation.

    The design SNR is ``1/sigma^2`` of a unit-amplitude BPSK coded bit, so the
    channel LLR mean is ``2 / sigma^2``.
    """
    stages = log2_exact(n_bits)
    mu = [2.0 * 10.0 ** (design_snr_db / 10.0)]
    # index bits are consumed MSB first; new index = 2*old + bit
    for _ in range(stages):
        nxt = []
        for m in mu:
            nxt.append(_ga_check(m))
            nxt.append(2.0 * m)
        mu = nxt
    return np.array(mu)


def construct_ga(n_bits, k_info, design_snr_db=2.0):
    """Frozen mask from Gaussian-approximation density evolution."""
    return _top_k_by(ga_mean_llrs(n_bits, design_snr_db), k_info)


def pw_weights(n_bits, beta=PW_BETA):
    stages = log2_exact(n_bits)
    idx = np.arange(n_bits)
    bits = (idx[:, None] >> np.arange(stages)[None, :]) & 1
    return bits @ (beta ** np.arange(stages))


def construct_pw(n_bits, k_info, beta=PW_BETA):
    """Frozen mask from polarization weights; ties go to the higher index."""
    return _top_k_by(pw_weights(n_bits, beta), k_info, prefer_high_index=True)


@lru_cache(maxsize=1)
def nr_reliability_sequence():
    """The bundled 5G NR reliability sequence, least reliable first."""
    text = resources.files("polariden").joinpath("data/nr_reliability_1024.txt").read_text()
    seq = np.array([int(line) for line in text.split()], dtype=np.int64)
    seq.setflags(write=False)
    return seq


def construct_5g(n_bits, k_info):
    """Frozen mask from the 5G NR sequence filtered to indices below ``N``."""
    seq = nr_reliability_sequence()
    log2_exact(n_bits)
    if n_bits > seq.size:
        raise UnsupportedLengthError(f"N={n_bits} exceeds the bundled table ({seq.size})")
    if not 0 <= k_info <= n_bits:
        raise ConfigError(f"K={k_info} outside [0, {n_bits}]")
    filtered = seq[seq < n_bits]
    mask = np.zeros(n_bits, dtype=bool)
    if k_info:
        mask[filtered[-k_info:]] = True
    return mask


CONSTRUCTIONS = {
    "ga": lambda n, k, snr: construct_ga(n, k, snr),
    "pw": lambda n, k, snr: construct_pw(n, k),
    "5g": lambda n, k, snr: construct_5g(n, k),
}


def construct(kind, n_bits, k_info, design_snr_db=2.0):
    try:
        builder = CONSTRUCTIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown construction {kind!r}") from None
    return CodeConfig(n_bits, k_info, builder(n_bits, k_info, design_snr_db))

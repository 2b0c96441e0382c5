"""QAM tables, the learnable constellation mapper and the soft demappers.

Bit groups are read big-endian: the first of the ``log2 M`` bits is the most
significant bit of the constellation index.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .decoders import LLR_MAX
from .errors import ConfigError, DegenerateConstellationError, InvalidInputError
from .nn import MLP

DEGENERACY_TOL = 1e-6


def bits_per_symbol(order):
    order = int(order)
    if order < 2 or order & (order - 1):
        raise ConfigError(f"modulation order must be a power of two, got {order}")
    return order.bit_length() - 1


def index_bits(order):
    """``(M, log2 M)`` table of each index's bits, MSB first."""
    m = bits_per_symbol(order)
    idx = np.arange(order)
    return ((idx[:, None] >> np.arange(m - 1, -1, -1)[None, :]) & 1).astype(np.uint8)


@dataclass(frozen=True)
class ConstellationSet:
    """``M`` points as an ``(M, 2)`` real matrix of (re, im) with power target ``p_tr`` (mW)."""

    points: np.ndarray
    p_tr: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidInputError(f"points must be (M, 2), got {pts.shape}")
        bits_per_symbol(pts.shape[0])
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def order(self):
        return self.points.shape[0]

    @property
    def bits(self):
        return bits_per_symbol(self.order)

    @property
    def complex(self):
        return self.points[:, 0] + 1j * self.points[:, 1]

    @property
    def mean_power(self):
        return float(np.mean(np.sum(self.points ** 2, axis=1)))

    def min_distance(self):
        c = self.complex
        d = np.abs(c[:, None] - c[None, :])
        return float(d[~np.eye(self.order, dtype=bool)].min())

    def to_csv_rows(self):
        return [(i, float(re), float(im)) for i, (re, im) in enumerate(self.points)]


def _gray_pam(bits):
    """Amplitude index of a Gray-labelled PAM level; all-zero bits map to the top level."""
    value = np.zeros(bits.shape[0], dtype=int)
    acc = np.zeros(bits.shape[0], dtype=int)
    for col in bits.T:
        acc ^= col
        value = (value << 1) | acc
    return value


def qam_constellation(order, p_tr=1.0):
    """Gray-mapped square QAM scaled to mean symbol power ``p_tr``."""
    if order not in (4, 16, 64):
        raise ConfigError(f"QAM order must be 4, 16 or 64, got {order}")
    m = bits_per_symbol(order)
    side = 2 ** (m // 2)
    bits = index_bits(order)
    levels = (side - 1) - 2 * np.arange(side)
    re = levels[_gray_pam(bits[:, : m // 2])]
    im = levels[_gray_pam(bits[:, m // 2:])]
    pts = np.stack([re, im], axis=1).astype(float)
    pts *= np.sqrt(p_tr / np.mean(np.sum(pts ** 2, axis=1)))
    return ConstellationSet(pts, p_tr)


def symbol_indices(c, order):
    """Constellation index of every ``log2 M`` bit group of ``c`` (shape ``(..., N)``)."""
    m = bits_per_symbol(order)
    c = np.asarray(c, dtype=np.int64)
    if c.shape[-1] % m:
        raise ConfigError(f"N={c.shape[-1]} is not divisible by log2(M)={m}")
    groups = c.reshape(c.shape[:-1] + (c.shape[-1] // m, m))
    return groups @ (1 << np.arange(m - 1, -1, -1))


def one_hot_map(c, order):
    """One-hot matrix ``V`` of shape ``(..., M, N / log2 M)``, one 1 per column."""
    idx = symbol_indices(c, order)
    v = np.zeros(idx.shape[:-1] + (order, idx.shape[-1]), dtype=np.uint8)
    np.put_along_axis(v, idx[..., None, :], 1, axis=-2)
    return v


def modulate(v, constellation):
    """Complex symbols ``x = V^T M`` for a one-hot block ``V``."""
    v = np.asarray(v)
    pts = constellation.points if isinstance(constellation, ConstellationSet) else np.asarray(constellation)
    if v.shape[-2] != pts.shape[0]:
        raise InvalidInputError(f"V has {v.shape[-2]} rows for {pts.shape[0]} points")
    x = np.swapaxes(v, -1, -2).astype(float) @ pts
    return x[..., 0] + 1j * x[..., 1]


def guard_degenerate(points, tol=DEGENERACY_TOL):
    pts = np.asarray(points)
    d = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
    d[np.diag_indices_from(d)] = np.inf
    if not np.all(np.isfinite(pts)) or d.min() < tol:
        raise DegenerateConstellationError(
            f"constellation points coincide (min distance {d.min():.3g} < {tol})")


class SnrScaler:
    """Affine standardization of SNR in dB: ``(10 log10 gamma - offset) / scale``."""

    def __init__(self, offset_db=0.0, scale_db=10.0):
        self.offset_db = float(offset_db)
        self.scale_db = float(scale_db)

    def __call__(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if np.any(gamma <= 0):
            raise InvalidInputError("SNR must be positive")
        return (10.0 * np.log10(gamma) - self.offset_db) / self.scale_db


class MapperNet:
    """``gamma -> (M, 2)`` dense ReLU network followed by power normalization."""

    def __init__(self, order, p_tr=1.0, hidden=(64, 64, 64), params=None, scaler=None):
        self.order = int(order)
        bits_per_symbol(self.order)
        self.p_tr = float(p_tr)
        self.mlp = MLP([1, *hidden, 2 * self.order], hidden="relu", output="linear",
                       prefix="mapper")
        self.scaler = scaler or SnrScaler()
        self.params = params

    def init_params(self, rng):
        self.params = self.mlp.init_params(rng)
        return self

    def forward(self, gamma, params=None):
        """Normalized points as a tensor (differentiable w.r.t. ``params``)."""
        params = self.params if params is None else params
        x = np.array([[float(self.scaler(gamma))]])
        raw = ad.reshape(self.mlp(x, params), (self.order, 2))
        power = ad.mean(ad.sum(ad.square(raw), axis=1))
        if ad.value_of(power) <= 0 or not np.isfinite(ad.value_of(power)):
            raise DegenerateConstellationError("mapper produced a zero-power constellation")
        pts = raw * ad.sqrt(self.p_tr / power)
        guard_degenerate(pts.value)
        return pts


def ae_mapper_forward(net, gamma):
    """Learned constellation for linear SNR ``gamma``."""
    if gamma <= 0:
        raise InvalidInputError(f"SNR must be positive, got {gamma}")
    return ConstellationSet(net.forward(gamma).value, net.p_tr)


class DemapperNet:
    """Per-symbol ``(re, im, gamma) -> log2 M`` LLRs dense ReLU network."""

    def __init__(self, order, hidden=(64, 64, 64), params=None, scaler=None):
        self.order = int(order)
        self.bits = bits_per_symbol(self.order)
        self.mlp = MLP([3, *hidden, self.bits], hidden="relu", output="linear",
                       prefix="demapper")
        self.scaler = scaler or SnrScaler()
        self.params = params

    def init_params(self, rng):
        self.params = self.mlp.init_params(rng)
        return self

    def forward(self, y, gamma, params=None):
        """``y`` is complex ``(..., S)`` or a real tensor ``(..., S, 2)``.

        Returns LLRs of shape ``(..., S * log2 M)`` in encoder bit order.
        """
        params = self.params if params is None else params
        if not isinstance(y, ad.Tensor):
            y = np.asarray(y)
            if np.iscomplexobj(y) or y.shape[-1] != 2:
                y = np.stack([np.real(y), np.imag(y)], axis=-1)
            y = ad.as_tensor(y)
        g = np.broadcast_to(float(self.scaler(gamma)), y.shape[:-1] + (1,))
        feats = ad.concat([y, g], axis=-1)
        out = self.mlp(feats, params)
        return ad.reshape(out, y.shape[:-2] + (y.shape[-2] * self.bits,))


def ae_demapper_forward(net, y_info, gamma):
    return net.forward(y_info, gamma).value


def exact_llr_demap(y_info, constellation, noise_var, rho=1.0, h=None, llr_max=LLR_MAX):
    """Exact bit LLRs for ``y = sqrt(rho) h s + n``, ``n ~ CN(0, noise_var)``.

    Uses log-sum-exp over the points labelled 0 and 1 for every bit.
    """
    if noise_var <= 0:
        raise InvalidInputError(f"noise variance must be positive, got {noise_var}")
    y = np.asarray(y_info, dtype=complex)
    pts = np.sqrt(rho) * constellation.complex
    if h is None:
        centers = pts
        dist = np.abs(y[..., None] - centers) ** 2
    else:
        centers = np.asarray(h, dtype=complex)[..., None] * pts
        dist = np.abs(y[..., None] - centers) ** 2
    metric = -dist / noise_var
    labels = index_bits(constellation.order)
    llrs = []
    for k in range(labels.shape[1]):
        zero = labels[:, k] == 0
        num = np.logaddexp.reduce(metric[..., zero], axis=-1)
        den = np.logaddexp.reduce(metric[..., ~zero], axis=-1)
        llrs.append(num - den)
    out = np.stack(llrs, axis=-1)
    out = out.reshape(out.shape[:-2] + (out.shape[-2] * out.shape[-1],))
    return np.clip(out, -llr_max, llr_max)

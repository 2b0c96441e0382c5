"""SC, SCL and min-sum belief-propagation decoders for natural-order polar codes.

LLRs follow ``log p(bit=0) / p(bit=1)``: a positive value decides 0.

The BP factor graph has ``n = log2 N`` stages and ``n + 1`` layers.  Layer 0
faces ``u`` and layer ``n`` faces the channel.  Stage ``s`` joins layer ``s``
to ``s + 1`` through ``N/2`` processing elements pairing positions ``j`` and
``j + N / 2**(s+1)``.  One iteration is a left-to-right sweep that refreshes
the ``R`` messages followed by a right-to-left sweep over the ``L`` messages.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InvalidInputError
from .nn import MLP
from .polar import log2_exact

LLR_MAX = 30.0


@dataclass
class OpCounters:
    """Per-frame operation tally of one decode call.

    ``memory`` is the total size of the distinct named weight/activation
    buffers a decoder touches; buffers are registered once by name.
    """

    additions: int = 0
    multiplications: int = 0
    buffers: dict = field(default_factory=dict)

    @property
    def memory(self):
        return int(sum(self.buffers.values()))

    def alloc(self, name, size):
        self.buffers.setdefault(name, int(size))

    def as_dict(self):
        return {"additions": self.additions, "multiplications": self.multiplications,
                "memory": self.memory}


def g_minsum(a, b):
    """``sign(a) sign(b) min(|a|, |b|)`` with ``sign(0) = +1``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = np.minimum(np.abs(a), np.abs(b))
    return np.where((a < 0) ^ (b < 0), -m, m)


def f_exact(a, b):
    t = np.tanh(np.clip(a, -LLR_MAX, LLR_MAX) / 2) * np.tanh(np.clip(b, -LLR_MAX, LLR_MAX) / 2)
    return 2.0 * np.arctanh(np.clip(t, -1 + 1e-15, 1 - 1e-15))


@lru_cache(maxsize=None)
def stage_pairs(n_bits):
    """``(top, bottom)`` index arrays of the processing elements per stage."""
    stages = log2_exact(n_bits)
    pairs = []
    idx = np.arange(n_bits)
    for s in range(stages):
        span = n_bits >> (s + 1)
        top = idx[(idx // span) % 2 == 0]
        top.setflags(write=False)
        bot = top + span
        bot.setflags(write=False)
        pairs.append((top, bot))
    return tuple(pairs)


@dataclass
class BpState:
    """Message lattices, shape ``(..., n + 1, N)``."""

    llr_left: np.ndarray
    llr_right: np.ndarray

    @property
    def n_bits(self):
        return self.llr_left.shape[-1]


@dataclass(frozen=True)
class BpWeights:
    """Scaling of right-to-left (``alpha``) and left-to-right (``beta``) messages.

    Both have shape ``(n, N)``: ``alpha[s]`` scales the ``L`` messages written
    into layer ``s``, ``beta[s]`` the ``R`` messages written into layer ``s+1``.
    """

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.shape != b.shape or a.ndim != 2:
            raise InvalidInputError(f"alpha {a.shape} / beta {b.shape} must match and be 2-D")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @classmethod
    def ones(cls, n_bits):
        n = log2_exact(n_bits)
        return cls(np.ones((n, n_bits)), np.ones((n, n_bits)))

    @property
    def size(self):
        return self.alpha.size + self.beta.size


def _prepare(channel_llrs, mask):
    llr = np.asarray(channel_llrs, dtype=float)
    single = llr.ndim == 1
    llr = np.atleast_2d(llr)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != llr.shape[-1]:
        raise InvalidInputError(f"mask length {mask.shape[-1]} != LLR length {llr.shape[-1]}")
    log2_exact(llr.shape[-1])
    return llr, mask, single


def bp_init(channel_llrs, mask, llr_max=LLR_MAX):
    """Initial lattices: frozen positions pinned to ``+llr_max`` on the left,
    channel LLRs on the right, everything else zero."""
    llr, mask, single = _prepare(channel_llrs, mask)
    batch, n_bits = llr.shape
    n = log2_exact(n_bits)
    left = np.zeros((batch, n + 1, n_bits))
    right = np.zeros((batch, n + 1, n_bits))
    right[:, 0, :] = np.where(mask, 0.0, llr_max)
    left[:, n, :] = np.clip(llr, -llr_max, llr_max)
    if single:
        left, right = left[0], right[0]
    return BpState(left, right)


def _bp_run(channel_llrs, mask, iterations, weight_for, counter=None, llr_max=LLR_MAX):
    """Run ``iterations`` sweeps; ``weight_for(t)`` yields BpWeights or None."""
    if iterations < 1:
        raise ConfigError(f"BP needs at least one iteration, got {iterations}")
    state = bp_init(channel_llrs, mask, llr_max)
    left, right = state.llr_left, state.llr_right
    if left.ndim == 2:
        left, right = left[None], right[None]
    n_bits = left.shape[-1]
    n = left.shape[-2] - 1
    pairs = stage_pairs(n_bits)

    for t in range(1, iterations + 1):
        w = weight_for(t)
        for s in range(n):
            top, bot = pairs[s]
            r_top, r_bot = right[:, s, top], right[:, s, bot]
            upper = g_minsum(r_top, left[:, s + 1, bot] + r_bot)
            lower = g_minsum(r_top, left[:, s + 1, top])
            if w is not None:
                upper = w.beta[s, top] * upper
                lower = w.beta[s, bot] * lower
            right[:, s + 1, top] = np.clip(upper, -llr_max, llr_max)
            right[:, s + 1, bot] = np.clip(lower + r_bot, -llr_max, llr_max)
            if counter is not None:
                counter.additions += n_bits
                if w is not None:
                    counter.multiplications += n_bits
        for s in range(n - 1, -1, -1):
            top, bot = pairs[s]
            l_top, l_bot = left[:, s + 1, top], left[:, s + 1, bot]
            upper = g_minsum(l_top, l_bot + right[:, s, bot])
            lower = g_minsum(right[:, s, top], l_top)
            if w is not None:
                upper = w.alpha[s, top] * upper
                lower = w.alpha[s, bot] * lower
            left[:, s, top] = np.clip(upper, -llr_max, llr_max)
            left[:, s, bot] = np.clip(lower + l_bot, -llr_max, llr_max)
            if counter is not None:
                counter.additions += n_bits
                if w is not None:
                    counter.multiplications += n_bits
    return right[:, 0, :] + left[:, 0, :], left, right


def _finish(decision, mask, single):
    soft = 1.0 / (1.0 + np.exp(-decision))
    bits = (soft < 0.5).astype(np.uint8)
    if mask.ndim == 1:
        soft, bits = soft[:, mask], bits[:, mask]
    if single:
        return bits[0], soft[0]
    return bits, soft


def bp_decode(channel_llrs, mask, iterations, weights=None, counter=None, llr_max=LLR_MAX):
    """Min-sum BP decoding.

    ``weights`` is ``None`` for plain BP, a :class:`BpWeights` shared by all
    iterations, or a sequence with one :class:`BpWeights` per iteration.
    Returns ``(bits, soft)`` at the info positions where ``soft`` is the
    sigmoid of the decision LLR, i.e. the probability of a zero bit.
    """
    llr, mask, single = _prepare(channel_llrs, mask)
    if weights is None or isinstance(weights, BpWeights):
        weight_for = lambda t: weights  # noqa: E731
        if weights is not None and counter is not None:
            counter.alloc("alpha", weights.alpha.size)
            counter.alloc("beta", weights.beta.size)
    else:
        per_iter = list(weights)
        if len(per_iter) < iterations:
            raise ConfigError(f"{len(per_iter)} weight sets for {iterations} iterations")
        if counter is not None:
            for t, w in enumerate(per_iter[:iterations], 1):
                counter.alloc(f"alpha[{t}]", w.alpha.size)
                counter.alloc(f"beta[{t}]", w.beta.size)
        weight_for = lambda t: per_iter[t - 1]  # noqa: E731
    decision, _, _ = _bp_run(llr, mask, iterations, weight_for, counter, llr_max)
    return _finish(decision, mask, single)


class HyperNet:
    """Bias-free tanh network mapping an iteration index to BP scalings.

    ``depth`` hidden layers of width ``width``; the linear output has one raw
    value per (stage, position).  The input is ``t / t_max``.  Raw outputs are
    mapped through ``exp`` to the right-to-left scalings ``alpha``; the
    left-to-right scalings ``beta`` are a shared trainable array independent
    of ``t``.  Zero output weights therefore reproduce plain BP.
    """

    def __init__(self, n_bits, t_max, width=8, depth=3, params=None, beta=None):
        self.n_bits = int(n_bits)
        self.stages = log2_exact(n_bits)
        self.t_max = int(t_max)
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        self.width = int(width)
        self.depth = int(depth)
        self.mlp = MLP([1] + [self.width] * self.depth + [self.out_dim],
                       hidden="tanh", output="linear", bias=False, prefix="hyper")
        self.params = self.mlp.zero_params() if params is None else dict(params)
        self.beta = np.ones((self.stages, self.n_bits)) if beta is None else np.asarray(beta, float)

    @property
    def out_dim(self):
        return self.stages * self.n_bits

    def init_params(self, rng):
        """Glorot hidden layers with a zero output layer: starts as plain BP."""
        self.params = self.mlp.init_params(rng, zero_last=True)
        return self

    def input_for(self, t):
        if not 1 <= t <= self.t_max:
            raise InvalidInputError(f"iteration {t} outside [1, {self.t_max}]")
        return np.array([[t / self.t_max]])

    def raw(self, t, params=None, counter=None):
        out = self.mlp(self.input_for(t), self.params if params is None else params)
        if counter is not None:
            sizes = self.mlp.sizes
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                counter.multiplications += fan_in * fan_out
                if i < len(sizes) - 2:
                    counter.alloc(f"hyper_hidden[{i}]", fan_out)
            counter.alloc("hyper_raw", self.out_dim)
        return out

    def weights(self, t, counter=None):
        raw = ad.value_of(self.raw(t, counter=counter)).reshape(self.stages, self.n_bits)
        if counter is not None:
            counter.alloc("alpha", raw.size)
            counter.alloc("beta", self.beta.size)
        return BpWeights(np.exp(raw), self.beta)


def hypernet_forward(net, t):
    """BP weights for iteration ``t`` generated by ``net``."""
    return net.weights(t)


def hyper_bp_decode(channel_llrs, mask, iterations, net, counter=None, llr_max=LLR_MAX):
    """BP where iteration ``t`` uses ``hypernet_forward(net, t)``."""
    if iterations > net.t_max:
        raise ConfigError(f"T={iterations} exceeds the hypernetwork range {net.t_max}")
    llr, mask, single = _prepare(channel_llrs, mask)
    cache = {}

    def weight_for(t):
        if t not in cache:
            cache[t] = net.weights(t, counter=counter)
        return cache[t]

    decision, _, _ = _bp_run(llr, mask, iterations, weight_for, counter, llr_max)
    return _finish(decision, mask, single)


# -- successive cancellation ----------------------------------------------------

def _sc_node(llr, mask, exact_f, u_hat, offset):
    m = llr.shape[-1]
    if not mask.any():
        return np.zeros(llr.shape, dtype=np.uint8)
    if m == 1:
        u = (llr[:, 0] < 0).astype(np.uint8)
        u_hat[:, offset] = u
        return u[:, None]
    h = m // 2
    a, b = llr[:, :h], llr[:, h:]
    left = f_exact(a, b) if exact_f else g_minsum(a, b)
    beta_l = _sc_node(left, mask[:h], exact_f, u_hat, offset)
    right = b + (1.0 - 2.0 * beta_l) * a
    beta_r = _sc_node(right, mask[h:], exact_f, u_hat, offset + h)
    return np.concatenate([beta_l ^ beta_r, beta_r], axis=-1)


def sc_decode(channel_llrs, mask, exact_f=False):
    """Successive cancellation; returns the decoded info bits."""
    llr, mask, single = _prepare(channel_llrs, mask)
    u_hat = np.zeros(llr.shape, dtype=np.uint8)
    _sc_node(llr, mask, exact_f, u_hat, 0)
    bits = u_hat[:, mask]
    return bits[0] if single else bits


def _penalty(lam, bit, exact):
    if exact:
        return np.logaddexp(0.0, -(1.0 - 2.0 * bit) * lam)
    return np.where((lam < 0) != (bit == 1), np.abs(lam), 0.0)


class _ListState:
    def __init__(self, batch, list_size, n_bits, exact):
        self.pm = np.full((batch, list_size), np.inf)
        self.pm[:, 0] = 0.0
        self.u_hat = np.zeros((batch, list_size, n_bits), dtype=np.uint8)
        self.list_size = list_size
        self.exact = exact


def _take_paths(x, perm):
    return np.take_along_axis(x, perm.reshape(perm.shape + (1,) * (x.ndim - 2)), axis=1)


def _scl_node(llr, mask, state, offset, exact_f):
    batch, list_size, m = llr.shape
    ident = np.broadcast_to(np.arange(list_size), (batch, list_size))
    if m == 1:
        lam = llr[:, :, 0]
        if not mask[0]:
            state.pm = state.pm + _penalty(lam, 0, state.exact)
            return np.zeros((batch, list_size, 1), dtype=np.uint8), ident
        cand = np.stack([state.pm + _penalty(lam, 0, state.exact),
                         state.pm + _penalty(lam, 1, state.exact)], axis=2)
        cand = cand.reshape(batch, 2 * list_size)
        order = np.argsort(cand, axis=1, kind="stable")[:, :list_size]
        parent = order // 2
        bit = (order % 2).astype(np.uint8)
        state.pm = np.take_along_axis(cand, order, axis=1)
        state.u_hat = _take_paths(state.u_hat, parent)
        state.u_hat[:, :, offset] = bit
        return bit[:, :, None], parent
    h = m // 2
    a, b = llr[..., :h], llr[..., h:]
    left = f_exact(a, b) if exact_f else g_minsum(a, b)
    beta_l, p1 = _scl_node(left, mask[:h], state, offset, exact_f)
    a, b = _take_paths(a, p1), _take_paths(b, p1)
    beta_r, p2 = _scl_node(b + (1.0 - 2.0 * beta_l) * a, mask[h:], state, offset + h, exact_f)
    beta_l = _take_paths(beta_l, p2)
    perm = np.take_along_axis(p1, p2, axis=1)
    return np.concatenate([beta_l ^ beta_r, beta_r], axis=-1), perm


def scl_decode(channel_llrs, mask, list_size, exact_f=False, exact_metric=False):
    """SC list decoding without CRC; returns the best-metric path's info bits.

    Candidates are ranked by a stable sort on the path metric with the parent
    path index and then the bit value as tie-breakers.
    """
    if list_size < 1:
        raise ConfigError(f"list size must be >= 1, got {list_size}")
    llr, mask, single = _prepare(channel_llrs, mask)
    batch, n_bits = llr.shape
    state = _ListState(batch, list_size, n_bits, exact_metric)
    start = np.repeat(llr[:, None, :], list_size, axis=1)
    _scl_node(start, mask, state, 0, exact_f)
    best = np.argmin(state.pm, axis=1)
    u_hat = state.u_hat[np.arange(batch), best]
    bits = u_hat[:, mask]
    return bits[0] if single else bits


# -- decoder objects used by the harness ------------------------------------

class Decoder:
    kind = "base"

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def decode(self, llrs, counter=None):
        raise NotImplementedError


class BpDecoder(Decoder):
    kind = "bp"

    def __init__(self, mask, iterations, weights=None):
        super().__init__(mask)
        self.iterations = int(iterations)
        self.weights = weights

    def decode(self, llrs, counter=None):
        return bp_decode(llrs, self.mask, self.iterations, self.weights, counter)[0]


class DnnBpDecoder(BpDecoder):
    """BP with an unrolled, per-iteration weight set (no weight sharing)."""

    kind = "dnn"

    def __init__(self, mask, iterations, weights):
        weights = list(weights)
        super().__init__(mask, iterations, weights)

    @classmethod
    def identity(cls, mask, iterations):
        n_bits = len(mask)
        return cls(mask, iterations, [BpWeights.ones(n_bits) for _ in range(iterations)])


class HyperBpDecoder(Decoder):
    kind = "hyper"

    def __init__(self, mask, iterations, net):
        super().__init__(mask)
        self.iterations = int(iterations)
        self.net = net

    def decode(self, llrs, counter=None):
        return hyper_bp_decode(llrs, self.mask, self.iterations, self.net, counter)[0]


class ScDecoder(Decoder):
    kind = "sc"

    def __init__(self, mask, exact_f=False):
        super().__init__(mask)
        self.exact_f = exact_f

    def decode(self, llrs, counter=None):
        return sc_decode(llrs, self.mask, self.exact_f)


class SclDecoder(Decoder):
    kind = "scl"

    def __init__(self, mask, list_size, exact_f=False):
        super().__init__(mask)
        self.list_size = int(list_size)
        self.exact_f = exact_f

    def decode(self, llrs, counter=None):
        return scl_decode(llrs, self.mask, self.list_size, self.exact_f)


# -- checkpoints ----------------------------------------------------------------

def save_decoder(path, decoder):
    """Write a trained hypernetwork or unrolled BP decoder."""
    from .checkpoint import save_checkpoint

    meta = {"decoder": decoder.kind, "iterations": decoder.iterations,
            "mask": decoder.mask.astype(int).tolist()}
    if isinstance(decoder, HyperBpDecoder):
        net = decoder.net
        arrays = dict(net.params)
        arrays["hyper/beta"] = net.beta
        meta.update(t_max=net.t_max, width=net.width, depth=net.depth)
    elif isinstance(decoder, DnnBpDecoder):
        arrays = {}
        for t, w in enumerate(decoder.weights, 1):
            arrays[f"dnn/alpha{t}"] = w.alpha
            arrays[f"dnn/beta{t}"] = w.beta
    else:
        raise ConfigError(f"decoder kind {decoder.kind!r} has no trainable state")
    save_checkpoint(path, arrays, "decoder", meta)


def load_decoder(path, mask=None, iterations=None):
    """Rebuild a decoder saved by :func:`save_decoder`.

    ``mask`` and ``iterations`` override the stored values (e.g. a shorter
    test-time schedule).
    """
    from .checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(path, kind="decoder")
    mask = np.asarray(meta["mask"], dtype=bool) if mask is None else mask
    iterations = meta["iterations"] if iterations is None else iterations
    if meta["decoder"] == "hyper":
        net = HyperNet(len(mask), meta["t_max"], meta["width"], meta["depth"],
                       params={k: v for k, v in arrays.items() if k.startswith("hyper/W")},
                       beta=arrays["hyper/beta"])
        return HyperBpDecoder(mask, iterations, net)
    if meta["decoder"] == "dnn":
        stored = meta["iterations"]
        if iterations > stored:
            raise ConfigError(f"T={iterations} exceeds the {stored} trained weight sets")
        weights = [BpWeights(arrays[f"dnn/alpha{t}"], arrays[f"dnn/beta{t}"])
                   for t in range(1, stored + 1)]
        return DnnBpDecoder(mask, iterations, weights)
    raise ConfigError(f"unknown decoder kind {meta['decoder']!r} in {path}")

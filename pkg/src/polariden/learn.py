"""Composite loss, optimizers and the training loops.

Everything runs in float64 on :mod:`polariden.autodiff` tapes.  Parameters
live in one flat ``{name: ndarray}`` dict:

``mapper/*``, ``demapper/*``
    constellation mapper and soft demapper networks
``hyper/W*``, ``hyper/beta``
    hypernetwork weights and the shared left-to-right BP scaling
``f_soft``, ``rho_logit``
    frozen-set selection logits and the splitting-factor logit

The harvester surrogate is never placed on a tape, so its parameters can not
move during end-to-end training.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .decoders import (LLR_MAX, BpWeights, DnnBpDecoder, HyperBpDecoder, HyperNet,
                       stage_pairs)
from .errors import ConfigError, InvalidInputError, NumericGuardError
from .link import NOISE_PLACEMENTS, Link
from .modem import (ConstellationSet, DemapperNet, MapperNet, bits_per_symbol,
                    index_bits, qam_constellation, symbol_indices)
from .phy import complex_normal, dbm_to_mw
from .polar import log2_exact, polar_encode, select_top_k

CE_EPS = 1e-7
P_OUT_FLOOR = 1e-9


# -- loss terms ---------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite loss.  ``lam`` defaults to ``0.01 * p_targ``."""

    p_targ: float
    r_targ: float = 0.5
    lam: Optional[float] = None
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta4: float = 1.0
    batch_size: int = 256

    def __post_init__(self):
        if self.lam is None:
            object.__setattr__(self, "lam", 0.01 * self.p_targ)
        for name in ("p_targ", "lam", "beta1", "beta2", "beta3", "beta4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if not 0.0 < self.r_targ <= 1.0:
            raise ConfigError(f"R_targ must lie in (0, 1], got {self.r_targ}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")


def loss_wit(b, b_hat, eps=CE_EPS, weights=None):
    """Log-likelihood ``sum_i b_i log b_hat_i + (1 - b_i) log(1 - b_hat_i)``.

    ``b_hat`` is the probability of a one bit, clipped to ``[eps, 1 - eps]``.
    Sums over the last axis, so a batch gives one value per frame.  The value
    is non-positive; the composite loss enters it with a minus sign.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != ad.as_tensor(b_hat).shape:
        raise InvalidInputError(f"bit shape {b.shape} != estimate shape {ad.as_tensor(b_hat).shape}")
    p = ad.clip(b_hat, eps, 1.0 - eps)
    terms = b * ad.log(p) + (1.0 - b) * ad.log(1.0 - p)
    if weights is not None:
        terms = terms * weights
    return ad.sum(terms, axis=-1)


def loss_wit_logits(b, llr, weights=None):
    """:func:`loss_wit` with ``b_hat = sigmoid(-llr)``, evaluated in log space.

    Used for training: confident wrong decisions keep a gradient instead of
    hitting the probability clip.
    """
    b = np.asarray(b, dtype=float)
    llr = ad.as_tensor(llr)
    if b.shape != llr.shape:
        raise InvalidInputError(f"bit shape {b.shape} != LLR shape {llr.shape}")
    terms = -(b * ad.softplus(llr) + (1.0 - b) * ad.softplus(-llr))
    if weights is not None:
        terms = terms * weights
    return ad.sum(terms, axis=-1)


def _wet_parts(p_out, w, floor=P_OUT_FLOOR):
    p = ad.as_tensor(p_out)
    if not np.all(np.isfinite(p.value)):
        raise NumericGuardError("harvested power is not finite")
    p = ad.clip(p, floor, np.inf)
    if np.any(p.value <= 0):
        raise NumericGuardError("harvested power is not positive after the floor")
    gap = w.p_targ - p
    return w.lam / p, gap, ad.square(gap)


def loss_wet(p_out, w, floor=P_OUT_FLOOR):
    """``lam / p_out + (P_targ - p_out) + (P_targ - p_out)^2`` elementwise."""
    inv, gap, sq = _wet_parts(p_out, w, floor)
    return inv + gap + sq


def loss_rate(f_soft, w):
    """``(mean sigmoid(f_soft) - R_targ)^2``."""
    return ad.square(ad.mean(ad.sigmoid(f_soft)) - w.r_targ)


def loss_total(wit, p_out, f_soft, w):
    """Batch mean of ``-L_WIT + b1 lam/p + b2 (P - p) + b3 (P - p)^2 + b4 L_rate``.

    ``wit`` holds the per-frame log-likelihoods from :func:`loss_wit`;
    ``p_out`` may be ``None`` for links without a harvester and ``f_soft``
    ``None`` for a fixed code.
    """
    per_frame = -ad.as_tensor(wit)
    if p_out is not None:
        inv, gap, sq = _wet_parts(p_out, w)
        per_frame = per_frame + w.beta1 * inv + w.beta2 * gap + w.beta3 * sq
    total = ad.mean(per_frame)
    if f_soft is not None:
        total = total + w.beta4 * loss_rate(f_soft, w)
    return total


# -- optimizers ------------------------------------------------------------

def _check_grads(params, grads):
    bad = []
    for name, g in grads.items():
        if name not in params:
            raise InvalidInputError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidInputError(f"gradient shape {np.shape(g)} != parameter shape "
                                    f"{np.shape(params[name])} for {name!r}")
        if not np.all(np.isfinite(g)):
            bad.append(name)
    if bad:
        raise NumericGuardError(f"non-finite gradient in {', '.join(sorted(bad))}")


class Sgd:
    kind = "sgd"

    def __init__(self, lr=0.005):
        self.lr = float(lr)

    def step(self, params, grads):
        """Update ``params`` in place and return it."""
        _check_grads(params, grads)
        for name, g in grads.items():
            params[name] = params[name] - self.lr * g
        return params

    def slots(self):
        return {}

    def load_slots(self, arrays, count=0):
        pass


class Adam:
    kind = "adam"

    def __init__(self, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.count = 0

    def step(self, params, grads):
        _check_grads(params, grads)
        self.count += 1
        c1 = 1.0 - self.beta1 ** self.count
        c2 = 1.0 - self.beta2 ** self.count
        for name in sorted(grads):
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def slots(self):
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_slots(self, arrays, count=0):
        self.count = int(count)
        for key, value in arrays.items():
            if key.startswith("adam.m/"):
                self.m[key[7:]] = value
            elif key.startswith("adam.v/"):
                self.v[key[7:]] = value


def make_optimizer(kind, lr):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return Sgd(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def step(optimizer, params, grads):
    return optimizer.step(params, grads)


# -- differentiable BP --------------------------------------------------------

def bp_unrolled(channel_llrs, r0, iterations, weight_for=None, llr_max=LLR_MAX):
    """Tensor version of the min-sum BP schedule.

    ``r0`` is the left-most ``R`` layer (``llr_max`` on frozen positions).
    ``weight_for(t)`` returns ``(alpha, beta)`` tensors of shape ``(n, N)`` or
    ``None``.  Returns the decision LLR tensor after every iteration.
    """
    llr = ad.clip(ad.as_tensor(channel_llrs), -llr_max, llr_max)
    batch, n_bits = llr.shape
    n = log2_exact(n_bits)
    pairs = stage_pairs(n_bits)
    zeros = ad.as_tensor(np.zeros((batch, n_bits)))
    half = np.zeros((batch, n_bits // 2))
    left = [zeros] * n + [llr]
    right = [ad.as_tensor(r0)] + [zeros] * n
    perms = [np.concatenate(p) for p in pairs]
    orders = [np.argsort(p) for p in perms]

    def col(x, idx):
        return ad.take(x, idx, axis=1, unique=True)

    def place(upper, lower, addend, row, s):
        c = ad.concat([upper, lower], axis=1)
        if row is not None:
            c = c * ad.take(row, perms[s], axis=0, unique=True)
        c = c + ad.concat([half, addend], axis=1)
        return ad.permute(ad.clip(c, -llr_max, llr_max), orders[s], axis=1)

    decisions = []
    for t in range(1, iterations + 1):
        w = weight_for(t) if weight_for is not None else None
        for s in range(n):
            top, bot = pairs[s]
            r_top, r_bot = col(right[s], top), col(right[s], bot)
            upper = ad.minsum(r_top, col(left[s + 1], bot) + r_bot)
            lower = ad.minsum(r_top, col(left[s + 1], top))
            row = None if w is None else ad.getitem(w[1], s)
            right[s + 1] = place(upper, lower, r_bot, row, s)
        for s in range(n - 1, -1, -1):
            top, bot = pairs[s]
            l_top, l_bot = col(left[s + 1], top), col(left[s + 1], bot)
            upper = ad.minsum(l_top, l_bot + col(right[s], bot))
            lower = ad.minsum(col(right[s], top), l_top)
            row = None if w is None else ad.getitem(w[0], s)
            left[s] = place(upper, lower, l_bot, row, s)
        decisions.append(right[0] + left[0])
    return decisions


def hyper_weight_fn(net, params, beta):
    """``t -> (exp(raw(t)), beta)`` on tensors, cached per iteration."""
    cache = {}

    def weight_for(t):
        if t not in cache:
            raw = net.mlp(net.input_for(t), params)
            cache[t] = (ad.exp(ad.reshape(raw, (net.stages, net.n_bits))), beta)
        return cache[t]

    return weight_for


def _iteration_ce(b, decisions, mode, positions=None, weights=None):
    """Per-frame CE (positive) of the final or of every iteration's output."""
    picked = decisions if mode == "all" else decisions[-1:]
    if mode not in ("all", "final"):
        raise ConfigError(f"iteration loss must be 'all' or 'final', got {mode!r}")
    total = None
    for d in picked:
        if positions is not None:
            d = ad.take(d, positions, axis=1, unique=True)
        ce = -loss_wit_logits(b, d, weights)
        total = ce if total is None else total + ce
    return total * (1.0 / len(picked))


# -- decoder-only training -------------------------------------------------

@dataclass
class DecoderTrainConfig:
    iterations: int = 6
    steps: int = 400
    batch_size: int = 64
    lr: float = 0.005
    optimizer: str = "adam"
    iteration_loss: str = "all"
    seed: int = 0


def _step_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _fit_decoder(link, cfg, params, weight_fn_for):
    """Shared loop: ``weight_fn_for(tensors)`` builds the BP weight function."""
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    positions = np.flatnonzero(link.mask)
    r0 = np.where(link.mask, 0.0, LLR_MAX)[None, :]
    history = []
    for it in range(cfg.steps):
        batch = link.frames(_step_rng(cfg.seed, 1, it), cfg.batch_size)
        tape = ad.Tape()
        tensors = {k: tape.variable(v) for k, v in params.items()}
        r0_b = np.broadcast_to(r0, batch.llrs.shape)
        decisions = bp_unrolled(batch.llrs, r0_b, cfg.iterations, weight_fn_for(tensors))
        loss = ad.mean(_iteration_ce(batch.info_bits, decisions, cfg.iteration_loss, positions))
        if not np.isfinite(loss.value):
            raise NumericGuardError(f"decoder training loss is not finite at step {it}")
        names = sorted(tensors)
        grads = dict(zip(names, tape.gradient(loss, [tensors[k] for k in names])))
        optimizer.step(params, grads)
        final = decisions[-1].value[:, positions]
        ber = float(np.mean((final < 0) != (batch.info_bits == 1)))
        history.append({"step": it, "loss": float(loss.value), "ber": ber})
    return params, history


def train_hyper_decoder(link, cfg=None, width=8, depth=3):
    """Train a hypernetwork BP decoder on frames drawn from ``link``.

    Returns ``(HyperBpDecoder, history)``.
    """
    cfg = cfg or DecoderTrainConfig()
    net = HyperNet(link.n_bits, cfg.iterations, width, depth)
    net.init_params(_step_rng(cfg.seed, 0))
    params = dict(net.params)
    params["hyper/beta"] = net.beta.copy()

    def weight_fn_for(tensors):
        hp = {k: v for k, v in tensors.items() if k != "hyper/beta"}
        return hyper_weight_fn(net, hp, tensors["hyper/beta"])

    params, history = _fit_decoder(link, cfg, params, weight_fn_for)
    net.beta = params.pop("hyper/beta")
    net.params = params
    return HyperBpDecoder(link.mask, cfg.iterations, net), history


def train_dnn_decoder(link, cfg=None):
    """Train unrolled BP with an independent weight set per iteration.

    Returns ``(DnnBpDecoder, history)``.  The default loss looks at the final
    iteration only.
    """
    cfg = cfg or replace(DecoderTrainConfig(), iteration_loss="final")
    n = log2_exact(link.n_bits)
    params = {}
    for t in range(1, cfg.iterations + 1):
        params[f"dnn/alpha{t}"] = np.ones((n, link.n_bits))
        params[f"dnn/beta{t}"] = np.ones((n, link.n_bits))

    def weight_fn_for(tensors):
        return lambda t: (tensors[f"dnn/alpha{t}"], tensors[f"dnn/beta{t}"])

    params, history = _fit_decoder(link, cfg, params, weight_fn_for)
    weights = [BpWeights(params[f"dnn/alpha{t}"], params[f"dnn/beta{t}"])
               for t in range(1, cfg.iterations + 1)]
    return DnnBpDecoder(link.mask, cfg.iterations, weights), history


def train_demapper(constellation, noise_var, steps=1500, batch_size=256, lr=0.005,
                   seed=0, hidden=(64, 64, 64)):
    """Fit a :class:`DemapperNet` by bitwise CE on ``s + CN(0, noise_var)``."""
    net = DemapperNet(constellation.order, hidden)
    net.init_params(_step_rng(seed, 0))
    gamma = constellation.mean_power / noise_var
    labels = index_bits(constellation.order).astype(float)
    optimizer = make_optimizer("adam", lr)
    history = []
    for it in range(steps):
        rng = _step_rng(seed, 1, it)
        idx = rng.integers(0, constellation.order, size=(batch_size, 1))
        y = constellation.complex[idx] + complex_normal(rng, idx.shape, noise_var)
        tape = ad.Tape()
        params = {k: tape.variable(v) for k, v in net.params.items()}
        llr = net.forward(y, gamma, params)
        loss = ad.mean(-loss_wit_logits(labels[idx[:, 0]], llr))
        names = sorted(params)
        grads = dict(zip(names, tape.gradient(loss, [params[k] for k in names])))
        optimizer.step(net.params, grads)
        history.append(float(loss.value))
    net.history = history
    return net


# -- end-to-end training -----------------------------------------------------

RHO_LOGIT_MAX = 30.0
TRAINABLE_GROUPS = ("mapper", "demapper", "decoder", "frozen", "rho")


@dataclass
class E2eConfig:
    """Settings of one end-to-end training run.

    ``mapper`` is ``"net"`` (learned) or ``"qam"`` (fixed Gray QAM) and
    ``demapper`` is ``"net"`` or ``"exact"`` (differentiable exact LLRs).
    """

    weights: LossWeights
    n_bits: int = 64
    k_info: int = 32
    order: int = 4
    channel: str = "awgn"
    tx_dbm: float = 3.0
    noise_dbm: float = -3.0
    noise_placement: str = "receiver"
    conv_noise_mw: float = 0.0
    iterations: int = 6
    hyper_width: int = 8
    hyper_depth: int = 3
    mapper: str = "net"
    demapper: str = "net"
    mapper_hidden: tuple = (64, 64, 64)
    demapper_hidden: tuple = (64, 64, 64)
    epochs: int = 500
    steps_per_epoch: int = 1
    lr: float = 0.005
    optimizer: str = "adam"
    seed: int = 0
    trainable: tuple = TRAINABLE_GROUPS
    iteration_loss: str = "final"
    rho_init: float = 0.5

    def __post_init__(self):
        log2_exact(self.n_bits)
        m = bits_per_symbol(self.order)
        if self.n_bits % m:
            raise ConfigError(f"N={self.n_bits} is not divisible by log2(M)={m}")
        if not 0 < self.k_info <= self.n_bits:
            raise ConfigError(f"K={self.k_info} outside (0, N]")
        if self.noise_placement not in NOISE_PLACEMENTS:
            raise ConfigError(f"noise placement must be one of {NOISE_PLACEMENTS}")
        if self.mapper not in ("net", "qam") or self.demapper not in ("net", "exact"):
            raise ConfigError("mapper must be 'net'/'qam' and demapper 'net'/'exact'")
        unknown = set(self.trainable) - set(TRAINABLE_GROUPS)
        if unknown:
            raise ConfigError(f"unknown trainable groups {sorted(unknown)}")
        if not 0.0 < self.rho_init < 1.0:
            raise ConfigError("rho_init must lie in (0, 1)")
        self.mapper_hidden = tuple(self.mapper_hidden)
        self.demapper_hidden = tuple(self.demapper_hidden)
        self.trainable = tuple(self.trainable)

    @property
    def tx_mw(self):
        return float(dbm_to_mw(self.tx_dbm))

    @property
    def noise_mw(self):
        return float(dbm_to_mw(self.noise_dbm))

    @property
    def gamma(self):
        return self.tx_mw / self.noise_mw

    def to_dict(self):
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        for key in ("mapper_hidden", "demapper_hidden", "trainable"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training settings {sorted(extra)}")
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def _group_of(name):
    if name.startswith("mapper/"):
        return "mapper"
    if name.startswith("demapper/"):
        return "demapper"
    if name.startswith("hyper/"):
        return "decoder"
    return {"f_soft": "frozen", "rho_logit": "rho"}[name]


@dataclass
class TrainState:
    config: E2eConfig
    params: dict
    optimizer: object
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self._shapes = {k: np.shape(v) for k, v in self.params.items()}

    @classmethod
    def initial(cls, cfg):
        rng = _step_rng(cfg.seed, 0)
        params = {}
        if cfg.mapper == "net":
            params.update(MapperNet(cfg.order, cfg.tx_mw, cfg.mapper_hidden).mlp.init_params(rng))
        if cfg.demapper == "net":
            params.update(DemapperNet(cfg.order, cfg.demapper_hidden).mlp.init_params(rng))
        net = HyperNet(cfg.n_bits, cfg.iterations, cfg.hyper_width, cfg.hyper_depth)
        params.update(net.init_params(rng).params)
        params["hyper/beta"] = np.ones((net.stages, cfg.n_bits))
        params["f_soft"] = np.zeros(cfg.n_bits)
        params["rho_logit"] = np.array(np.log(cfg.rho_init / (1.0 - cfg.rho_init)))
        return cls(cfg, params, make_optimizer(cfg.optimizer, cfg.lr))

    def trainable_names(self):
        return sorted(k for k in self.params if _group_of(k) in self.config.trainable)

    def check_shapes(self):
        for k, v in self.params.items():
            if np.shape(v) != self._shapes[k]:
                raise InvalidInputError(f"parameter {k} changed shape")

    @property
    def rho(self):
        return float(1.0 / (1.0 + np.exp(-self.params["rho_logit"])))

    @property
    def rate(self):
        return float(np.mean(1.0 / (1.0 + np.exp(-self.params["f_soft"]))))

    def mask(self):
        """Test-time info set: the K largest selection logits."""
        return select_top_k(self.params["f_soft"], self.config.k_info)

    def mapper_net(self):
        cfg = self.config
        return MapperNet(cfg.order, cfg.tx_mw, cfg.mapper_hidden,
                         params={k: v for k, v in self.params.items() if k.startswith("mapper/")})

    def constellation(self):
        cfg = self.config
        if cfg.mapper == "qam":
            return qam_constellation(cfg.order, cfg.tx_mw)
        return ConstellationSet(self.mapper_net().forward(cfg.gamma).value, cfg.tx_mw)

    def demapper_net(self):
        if self.config.demapper != "net":
            return None
        return DemapperNet(self.config.order, self.config.demapper_hidden,
                           params={k: v for k, v in self.params.items() if k.startswith("demapper/")})

    def hypernet(self):
        cfg = self.config
        hp = {k: v for k, v in self.params.items() if k.startswith("hyper/W")}
        return HyperNet(cfg.n_bits, cfg.iterations, cfg.hyper_width, cfg.hyper_depth,
                        params=hp, beta=self.params["hyper/beta"].copy())

    def decoder(self, iterations=None):
        return HyperBpDecoder(self.mask(), iterations or self.config.iterations, self.hypernet())

    def link(self, harvester):
        """Numpy test-time link built from the learned parameters."""
        cfg = self.config
        return Link(self.mask(), self.constellation(), cfg.tx_mw, cfg.noise_mw, self.rho,
                    harvester, cfg.channel, cfg.noise_placement, cfg.conv_noise_mw,
                    demapper=self.demapper_net(), gamma=cfg.gamma)

    def save(self, path):
        arrays = dict(self.params)
        arrays.update(self.optimizer.slots())
        meta = {"config": self.config.to_dict(), "epoch": self.epoch,
                "optimizer_count": getattr(self.optimizer, "count", 0),
                "history": self.history}
        save_checkpoint(path, arrays, "train-state", meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path, kind="train-state")
        cfg = E2eConfig.from_dict(meta["config"])
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        if "rho_logit" in params:
            params["rho_logit"] = np.asarray(params["rho_logit"]).reshape(())
        optimizer = make_optimizer(cfg.optimizer, cfg.lr)
        optimizer.load_slots({k: v for k, v in arrays.items() if k.startswith("adam.")},
                             meta.get("optimizer_count", 0))
        return cls(cfg, params, optimizer, meta.get("epoch", 0), meta.get("history", []))


def _logsumexp(x, axis=-1):
    m = np.max(x.value, axis=axis, keepdims=True)
    return ad.log(ad.sum(ad.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)


def exact_llr_tensor(zr, zi, points, noise_var, gain):
    """Differentiable exact LLRs of equalized samples ``z`` shaped ``(B, S)``.

    ``gain`` scales the centres (``sqrt(rho)``); ``noise_var`` is an array
    broadcastable to ``(B, S)`` or a tensor broadcastable to ``(B, S, 1)``.  Returns ``(B, S * log2 M)``.
    """
    points = ad.as_tensor(points)
    order = points.shape[0]
    cr = ad.take(points, 0, axis=1) * gain
    ci = ad.take(points, 1, axis=1) * gain
    batch, syms = zr.shape
    dr = ad.reshape(zr, (batch, syms, 1)) - cr
    di = ad.reshape(zi, (batch, syms, 1)) - ci
    if isinstance(noise_var, ad.Tensor):
        var = noise_var
    else:
        var = np.broadcast_to(np.asarray(noise_var, dtype=float), (batch, syms))[..., None]
    metric = -(ad.square(dr) + ad.square(di)) / var
    labels = index_bits(order)
    out = []
    for k in range(labels.shape[1]):
        zero = np.flatnonzero(labels[:, k] == 0)
        one = np.flatnonzero(labels[:, k] == 1)
        out.append(_logsumexp(ad.take(metric, zero, axis=2, unique=True))
                   - _logsumexp(ad.take(metric, one, axis=2, unique=True)))
    llr = ad.stack(out, axis=-1)
    return ad.reshape(llr, (batch, syms * labels.shape[1]))


def e2e_forward(state, harvester, rng, tensors=None):
    """One batch through the differentiable link.

    ``tensors`` maps parameter names to tape variables (missing names are
    used as constants).  Returns a dict with ``loss`` (tensor) and the batch
    ``ber``, ``p_out`` mean and ``f_hard``.
    """
    cfg = state.config
    w = cfg.weights
    p = dict(state.params)
    if tensors:
        p.update(tensors)
    batch, n_bits = w.batch_size, cfg.n_bits

    # frozen-set sampling with the straight-through binarizer
    f_pro = ad.sigmoid(p["f_soft"])
    p_u = rng.random((batch, n_bits))
    f_hard = ad.ste_binarize(ad.reshape(f_pro, (1, n_bits)) + np.zeros((batch, 1)), p_u)
    info = f_hard.value.astype(bool)
    u = (rng.integers(0, 2, size=(batch, n_bits)) * info).astype(np.uint8)
    c = polar_encode(u)
    idx = symbol_indices(c, cfg.order)

    if cfg.mapper == "net":
        mapper = MapperNet(cfg.order, cfg.tx_mw, cfg.mapper_hidden)
        points = mapper.forward(cfg.gamma, {k: v for k, v in p.items() if k.startswith("mapper/")})
    else:
        points = ad.as_tensor(qam_constellation(cfg.order, cfg.tx_mw).points)
    xr = ad.take(ad.take(points, 0, axis=1), idx, axis=0)
    xi = ad.take(ad.take(points, 1, axis=1), idx, axis=0)

    shape = idx.shape
    if cfg.channel == "rayleigh":
        hc = complex_normal(rng, shape, 1.0)
    else:
        hc = np.ones(shape, dtype=complex)
    hr, hi = hc.real, hc.imag
    yr, yi = hr * xr - hi * xi, hr * xi + hi * xr
    pre_noise = cfg.noise_mw if cfg.noise_placement == "channel" else 0.0
    if pre_noise > 0:
        n0 = complex_normal(rng, shape, pre_noise)
        yr, yi = yr + n0.real, yi + n0.imag

    rho = ad.sigmoid(p["rho_logit"])
    branch_var = cfg.conv_noise_mw + (cfg.noise_mw if cfg.noise_placement == "receiver" else 0.0)
    gain = ad.sqrt(rho)
    ir, ii = yr * gain, yi * gain
    if branch_var > 0:
        nb = complex_normal(rng, shape, branch_var)
        ir, ii = ir + nb.real, ii + nb.imag
    p_in = (1.0 - rho) * ad.mean(ad.square(yr) + ad.square(yi), axis=1)
    p_out = harvester.forward(p_in)

    power = np.abs(hc) ** 2
    zr, zi = (ir * hr + ii * hi) / power, (ii * hr - ir * hi) / power
    if cfg.demapper == "net":
        demapper = DemapperNet(cfg.order, cfg.demapper_hidden)
        feats = ad.stack([zr, zi], axis=-1)
        llr = demapper.forward(feats, cfg.gamma, {k: v for k, v in p.items() if k.startswith("demapper/")})
    else:
        noise_var = (pre_noise * rho + branch_var) * (1.0 / power)[..., None]
        llr = exact_llr_tensor(zr, zi, points, noise_var, gain)
    llr = ad.clip(llr, -LLR_MAX, LLR_MAX)

    r0 = (1.0 - f_hard) * LLR_MAX
    net = HyperNet(cfg.n_bits, cfg.iterations, cfg.hyper_width, cfg.hyper_depth)
    hp = {k: v for k, v in p.items() if k.startswith("hyper/W")}
    decisions = bp_unrolled(llr, r0, cfg.iterations, hyper_weight_fn(net, hp, ad.as_tensor(p["hyper/beta"])))
    ce = _iteration_ce(u, decisions, cfg.iteration_loss, weights=f_hard)
    loss = loss_total(-ce, p_out, p["f_soft"], w)

    final = decisions[-1].value
    n_info = max(int(info.sum()), 1)
    ber = float(np.sum(((final < 0) != (u == 1)) & info) / n_info)
    return {"loss": loss, "ber": ber, "p_out": float(np.mean(p_out.value)), "f_hard": f_hard.value}


def train_step(state, harvester, rng):
    """One optimizer update; returns the batch metrics."""
    tape = ad.Tape()
    names = state.trainable_names()
    tensors = {k: tape.variable(state.params[k]) for k in names}
    out = e2e_forward(state, harvester, rng, tensors)
    loss = out["loss"]
    if not np.isfinite(loss.value):
        raise NumericGuardError("training loss is not finite")
    if loss.tape is tape:
        grads = dict(zip(names, tape.gradient(loss, [tensors[k] for k in names])))
        state.optimizer.step(state.params, grads)
        if "rho_logit" in state.params:
            # keeps sigmoid(logit) strictly inside (0, 1) in float64
            state.params["rho_logit"] = np.clip(state.params["rho_logit"], -RHO_LOGIT_MAX, RHO_LOGIT_MAX)
    state.check_shapes()
    out["loss"] = float(loss.value)
    return out


def train_end_to_end(cfg, harvester, state=None, abort_path=None, log=None):
    """Run ``cfg.epochs`` epochs and return ``(TrainState, history)``.

    ``history`` rows hold ``epoch, loss, ber, p_out_mw, rate`` averaged over
    the epoch's steps.  A non-finite loss stops training; the exception
    carries the last good state in ``.state`` and, when ``abort_path`` is
    given, that state is written there first.
    """
    state = state or TrainState.initial(cfg)
    frozen_eh = {k: v.copy() for k, v in (harvester.params or {}).items()}
    start = state.epoch
    for epoch in range(start, cfg.epochs):
        rows = []
        for s in range(cfg.steps_per_epoch):
            backup = {k: v.copy() for k, v in state.params.items()}
            try:
                rows.append(train_step(state, harvester, _step_rng(cfg.seed, 2, epoch, s)))
            except NumericGuardError as exc:
                state.params = backup
                if abort_path is not None:
                    state.save(abort_path)
                exc.state = state
                raise
        row = {"epoch": epoch,
               "loss": float(np.mean([r["loss"] for r in rows])),
               "ber": float(np.mean([r["ber"] for r in rows])),
               "p_out_mw": float(np.mean([r["p_out"] for r in rows])),
               "rate": state.rate}
        state.history.append(row)
        state.epoch = epoch + 1
        if log is not None:
            log(row)
    for k, v in frozen_eh.items():
        if not np.array_equal(v, harvester.params[k]):
            raise RuntimeError(f"harvester parameter {k} changed during training")
    return state, state.history

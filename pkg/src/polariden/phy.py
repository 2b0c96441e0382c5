"""Channel, power splitter and the nonlinear energy-harvester surrogate.

All powers are in mW.
"""

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .errors import ConfigError, FitError, InvalidInputError, NumericGuardError
from .nn import MLP


def dbm_to_mw(p_dbm):
    return 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0)


def mw_to_dbm(p_mw):
    p = np.asarray(p_mw, dtype=float)
    if np.any(p <= 0):
        raise NumericGuardError("mw_to_dbm needs a positive power")
    return 10.0 * np.log10(p)


def complex_normal(rng, shape, var):
    """Samples of ``CN(0, var)``."""
    s = np.sqrt(var / 2.0)
    return s * rng.standard_normal(shape) + 1j * s * rng.standard_normal(shape)


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "awgn"
    noise_power: float = 0.0

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh"):
            raise ConfigError(f"unknown channel kind {self.kind!r}")
        if self.noise_power < 0:
            raise ConfigError("noise power must be non-negative")


def channel_apply(x, spec, rng):
    """``y = h * x + n0``; returns ``(y, h)``.  AWGN uses ``h = 1``."""
    x = np.asarray(x, dtype=complex)
    if spec.kind == "rayleigh":
        h = complex_normal(rng, x.shape, 1.0)
    else:
        h = np.ones(x.shape, dtype=complex)
    y = h * x
    if spec.noise_power > 0:
        y = y + complex_normal(rng, x.shape, spec.noise_power)
    return y, h


@dataclass(frozen=True)
class PowerSplit:
    """Splitting factor ``rho = sigmoid(rho_logit)`` and baseband conversion noise."""

    rho_logit: float = 0.0
    conv_noise_var: float = 0.0

    @classmethod
    def from_rho(cls, rho, conv_noise_var=0.0):
        if not 0.0 < rho < 1.0:
            if rho == 1.0:
                return cls(np.inf, conv_noise_var)
            raise ConfigError(f"rho must lie in (0, 1], got {rho}")
        return cls(float(np.log(rho / (1.0 - rho))), conv_noise_var)

    @property
    def rho(self):
        if np.isposinf(self.rho_logit):
            return 1.0
        return float(1.0 / (1.0 + np.exp(-self.rho_logit)))


def power_split(y, split, rng=None):
    """Information branch ``sqrt(rho) y + n_b`` and harvester input power.

    ``p_in = (1 - rho) * mean |y|^2`` over the last axis (one value per frame).
    """
    y = np.asarray(y, dtype=complex)
    rho = split.rho
    info = np.sqrt(rho) * y
    if split.conv_noise_var > 0:
        if rng is None:
            raise InvalidInputError("conversion noise needs an rng")
        info = info + complex_normal(rng, y.shape, split.conv_noise_var)
    p_in = (1.0 - rho) * np.mean(np.abs(y) ** 2, axis=-1)
    return info, p_in


@dataclass(frozen=True)
class EhReference:
    """Normalized logistic saturation with ``f(0) = 0`` and ``f(inf) = p_sat``."""

    p_sat: float = 0.1
    a: float = 1.5
    b: float = 1.0

    def __call__(self, p_in):
        return eh_reference(p_in, self.p_sat, self.a, self.b)

    def inverse(self, p_out):
        """Input power that yields ``p_out`` (``inf`` at or above ``p_sat``)."""
        p_out = np.asarray(p_out, dtype=float)
        s0 = _logistic(-self.a * self.b)
        s = s0 + (1.0 - s0) * p_out / self.p_sat
        with np.errstate(divide="ignore"):
            p = self.b + np.log(s / (1.0 - s)) / self.a
        return np.where(p_out >= self.p_sat, np.inf, np.maximum(p, 0.0))


def _logistic(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=float)))


def eh_reference(p_in, p_sat=0.1, a=1.5, b=1.0):
    p = np.asarray(p_in, dtype=float)
    if np.any(p < 0):
        raise InvalidInputError("harvester input power must be non-negative")
    s0 = _logistic(-a * b)
    return p_sat * (_logistic(a * (p - b)) - s0) / (1.0 - s0)


class EhSurrogate:
    """Dense tanh network fitted to an input/output power curve.

    The input is mapped from ``[0, p_max]`` onto ``[-1, 1]`` (clamped outside
    that range) and the tanh output is rescaled by ``out_scale``.  Parameters
    stay fixed after :func:`eh_fit`.
    """

    def __init__(self, p_max, out_scale, hidden=(16, 16, 16), params=None):
        self.p_max = float(p_max)
        self.out_scale = float(out_scale)
        self.mlp = MLP([1, *hidden, 1], hidden="tanh", output="tanh", prefix="eh")
        self.params = params

    def forward(self, p_in, params=None):
        """Differentiable in ``p_in``; returns a tensor of the same shape."""
        params = self.params if params is None else params
        p = ad.clip(ad.as_tensor(p_in), 0.0, self.p_max)
        shape = p.shape
        x = ad.reshape(p * (2.0 / self.p_max) - 1.0, (-1, 1))
        out = self.mlp(x, params) * self.out_scale
        return ad.reshape(out, shape)

    def __call__(self, p_in):
        return self.forward(p_in).value


def eh_forward(p_in, surrogate):
    return surrogate(p_in)


def eh_fit(samples, seed=0, tol=None, hidden=(16, 16, 16), max_iter=4000, restarts=3):
    """Least-squares fit of an :class:`EhSurrogate` to ``(p_in, p_out)`` samples.

    Raises :class:`FitError` with the residual when the max-abs error on the
    samples is above ``tol`` (default: 1% of the largest output, or 1e-4 mW
    for an all-zero curve).
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 2:
        raise InvalidInputError("samples must be an (n, 2) array of (p_in, p_out)")
    p_in, p_out = data[:, 0], data[:, 1]
    if np.any(p_in < 0):
        raise InvalidInputError("harvester input power must be non-negative")
    peak = float(np.max(np.abs(p_out)))
    if tol is None:
        tol = 0.01 * peak if peak > 0 else 1e-4
    out_scale = 1.25 * peak if peak > 0 else 1.0
    p_max = float(np.max(p_in)) or 1.0

    best = None
    for attempt in range(restarts):
        rng = np.random.default_rng([seed, attempt])
        model = EhSurrogate(p_max, out_scale, hidden)
        init = model.mlp.init_params(rng)
        names = list(init)
        shapes = [init[k].shape for k in names]
        sizes = [init[k].size for k in names]
        target = p_out / out_scale

        def unpack(theta):
            parts = np.split(theta, np.cumsum(sizes)[:-1])
            return {k: p.reshape(s) for k, p, s in zip(names, parts, shapes)}

        def objective(theta):
            tape = ad.Tape()
            params = {k: tape.variable(v) for k, v in unpack(theta).items()}
            x = p_in * (2.0 / p_max) - 1.0
            pred = model.mlp(x[:, None], params)
            loss = ad.mean(ad.square(ad.reshape(pred, (-1,)) - target))
            grads = tape.gradient(loss, [params[k] for k in names])
            return float(loss.value), np.concatenate([g.ravel() for g in grads])

        theta0 = np.concatenate([init[k].ravel() for k in names])
        res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B",
                                options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12})
        model.params = unpack(res.x)
        err = float(np.max(np.abs(model(p_in) - p_out)))
        if best is None or err < best[1]:
            best = (model, err)
        if err < tol:
            break
    model, err = best
    if err >= tol:
        raise FitError(f"EH fit max-abs error {err:.3g} mW above tolerance {tol:.3g} mW",
                       residual=err)
    model.fit_error = err
    return model


def save_surrogate(path, model):
    from .checkpoint import save_checkpoint

    meta = {"p_max": model.p_max, "out_scale": model.out_scale,
            "hidden": list(model.mlp.sizes[1:-1]),
            "fit_error": getattr(model, "fit_error", None)}
    save_checkpoint(path, model.params, "eh-surrogate", meta)


def load_surrogate(path):
    from .checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(path, kind="eh-surrogate")
    model = EhSurrogate(meta["p_max"], meta["out_scale"], tuple(meta["hidden"]), arrays)
    model.fit_error = meta.get("fit_error")
    return model


def eh_reference_samples(n=1000, p_max=10.0, ref=None):
    ref = ref or EhReference()
    p = np.linspace(0.0, p_max, n)
    return np.stack([p, ref(p)], axis=1)

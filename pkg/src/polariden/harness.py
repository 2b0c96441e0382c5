"""Configuration, Monte Carlo simulation, sweeps and CSV reporting.

Monte Carlo runs are split into chunks of frames.  Chunk ``i`` draws from
``SeedSequence([seed, i])``, and chunks are reduced in index order, so the
result does not depend on the number of workers.
"""

import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy import stats

from .decoders import (BpDecoder, DnnBpDecoder, HyperBpDecoder, HyperNet, OpCounters,
                       ScDecoder, SclDecoder, load_decoder)
from .errors import CheckpointError, ConfigError
from .link import NOISE_PLACEMENTS, FrameBatch, Link
from .modem import bits_per_symbol, qam_constellation
from .phy import EhReference, dbm_to_mw, load_surrogate
from .polar import CONSTRUCTIONS, construct, log2_exact

CSV_VERSION = 1
DECODER_KINDS = ("bp", "dnn", "hyper", "sc", "scl")


# -- configuration ---------------------------------------------------------

@dataclass
class CodeSection:
    n: int = 64
    k: int = 32
    construction: str = "ga"
    design_snr_db: float = 2.0


@dataclass
class DecoderSection:
    kind: str = "bp"
    iterations: int = 50
    list_size: int = 2
    checkpoint: Optional[str] = None


@dataclass
class ModulationSection:
    order: int = 4
    mapper: str = "qam"


@dataclass
class ChannelSection:
    kind: str = "awgn"
    noise_dbm: Optional[float] = -3.0
    placement: str = "receiver"
    conv_noise_mw: float = 0.0


@dataclass
class PowerSection:
    tx_dbm: float = 3.0
    rho: object = 0.8


@dataclass
class EnergySection:
    p_targ_mw: float = 0.03
    model: str = "reference"
    p_sat: float = 0.1
    a: float = 1.5
    b: float = 1.0
    surrogate_checkpoint: Optional[str] = None


@dataclass
class SimSection:
    seed: int = 0
    frames: int = 10000
    max_block_errors: Optional[int] = 100
    chunk: int = 500
    workers: int = 1


@dataclass
class SystemSection:
    kind: str = "fixed"
    checkpoint: Optional[str] = None


SECTIONS = OrderedDict([
    ("code", CodeSection), ("decoder", DecoderSection), ("modulation", ModulationSection),
    ("channel", ChannelSection), ("power", PowerSection), ("energy", EnergySection),
    ("sim", SimSection), ("system", SystemSection),
])


@dataclass
class SimConfig:
    code: CodeSection = field(default_factory=CodeSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    modulation: ModulationSection = field(default_factory=ModulationSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    power: PowerSection = field(default_factory=PowerSection)
    energy: EnergySection = field(default_factory=EnergySection)
    sim: SimSection = field(default_factory=SimSection)
    system: SystemSection = field(default_factory=SystemSection)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        c = self.code
        log2_exact(c.n)
        if not 0 < c.k <= c.n:
            raise ConfigError(f"K={c.k} outside (0, N={c.n}]")
        if c.construction not in CONSTRUCTIONS:
            raise ConfigError(f"unknown construction {c.construction!r}")
        d = self.decoder
        if d.kind not in DECODER_KINDS:
            raise ConfigError(f"decoder kind must be one of {DECODER_KINDS}")
        if d.iterations < 1 or d.list_size < 1:
            raise ConfigError("iterations and list size must be positive")
        m = bits_per_symbol(self.modulation.order)
        if c.n % m:
            raise ConfigError(f"N={c.n} is not divisible by log2(M)={m}")
        if self.modulation.mapper not in ("qam", "learned"):
            raise ConfigError("mapper must be 'qam' or 'learned'")
        ch = self.channel
        if ch.kind not in ("awgn", "rayleigh"):
            raise ConfigError(f"unknown channel kind {ch.kind!r}")
        if ch.placement not in NOISE_PLACEMENTS:
            raise ConfigError(f"noise placement must be one of {NOISE_PLACEMENTS}")
        if ch.conv_noise_mw < 0:
            raise ConfigError("conversion noise must be non-negative")
        rho = self.power.rho
        if rho != "trained" and not (isinstance(rho, (int, float)) and 0 < rho <= 1):
            raise ConfigError(f"rho must be in (0, 1] or 'trained', got {rho!r}")
        e = self.energy
        if e.model not in ("reference", "surrogate"):
            raise ConfigError("energy model must be 'reference' or 'surrogate'")
        if e.p_targ_mw < 0 or e.p_sat <= 0:
            raise ConfigError("energy targets must be non-negative and p_sat positive")
        s = self.sim
        if s.frames < 1 or s.chunk < 1 or s.workers < 1:
            raise ConfigError("frames, chunk and workers must be positive")
        if self.system.kind not in ("fixed", "learned"):
            raise ConfigError("system kind must be 'fixed' or 'learned'")
        if self.system.kind == "learned" and not self.system.checkpoint:
            raise ConfigError("a learned system needs system.checkpoint")

    @property
    def tx_mw(self):
        return float(dbm_to_mw(self.power.tx_dbm))

    @property
    def noise_mw(self):
        nd = self.channel.noise_dbm
        return 0.0 if nd is None else float(dbm_to_mw(nd))

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        unknown = set(raw) - set(SECTIONS) - {"train"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            values = raw.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section)}
            extra = set(values) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            kwargs[name] = section(**values)
        kwargs["train"] = dict(raw.get("train") or {})
        return cls(**kwargs)

    def to_dict(self):
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["train"] = dict(self.train)
        return d

    def with_changes(self, **sections):
        """Copy with some section fields replaced, e.g. ``power={"rho": 0.5}``."""
        d = self.to_dict()
        for name, values in sections.items():
            d[name].update(values)
        return SimConfig.from_dict(d)


def load_config(path):
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    try:
        return SimConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- building blocks ---------------------------------------------------------

def build_harvester(cfg):
    e = cfg.energy
    if e.model == "surrogate":
        if not e.surrogate_checkpoint:
            raise ConfigError("energy.model 'surrogate' needs energy.surrogate_checkpoint")
        return load_surrogate(e.surrogate_checkpoint)
    return EhReference(e.p_sat, e.a, e.b)


def build_code(cfg):
    c = cfg.code
    return construct(c.construction, c.n, c.k, c.design_snr_db)


def _learned_state(cfg):
    from .learn import TrainState

    return TrainState.load(cfg.system.checkpoint)


def build_link(cfg, rho=None, harvester=None):
    """``Link`` for ``cfg``; ``rho`` overrides the configured splitting factor."""
    harvester = harvester or build_harvester(cfg)
    if cfg.system.kind == "learned":
        state = _learned_state(cfg)
        link = state.link(harvester)
        if rho is not None:
            link = Link(link.mask, link.constellation, link.tx_mw, link.noise_mw, rho,
                        harvester, link.channel.kind, link.placement,
                        state.config.conv_noise_mw, link.demapper, link.gamma)
        return link
    if cfg.modulation.mapper != "qam":
        raise ConfigError("a learned mapper needs system.kind 'learned'")
    rho = cfg.power.rho if rho is None else rho
    if rho == "trained":
        raise ConfigError("rho 'trained' needs system.kind 'learned'")
    code = build_code(cfg)
    return Link(code.frozen_mask, qam_constellation(cfg.modulation.order, cfg.tx_mw),
                cfg.tx_mw, cfg.noise_mw, float(rho), harvester, cfg.channel.kind,
                cfg.channel.placement, cfg.channel.conv_noise_mw)


def build_decoder(cfg, mask, kind=None, iterations=None, checkpoint=None):
    d = cfg.decoder
    kind = kind or d.kind
    iterations = iterations or d.iterations
    checkpoint = checkpoint or d.checkpoint
    if kind == "bp":
        return BpDecoder(mask, iterations)
    if kind == "sc":
        return ScDecoder(mask)
    if kind == "scl":
        return SclDecoder(mask, d.list_size)
    if kind == "hyper" and cfg.system.kind == "learned" and checkpoint is None:
        return _learned_state(cfg).decoder(iterations)
    if kind in ("dnn", "hyper"):
        if not checkpoint:
            raise CheckpointError(f"decoder kind {kind!r} needs decoder.checkpoint")
        dec = load_decoder(checkpoint, mask=mask, iterations=iterations)
        if dec.kind != kind:
            raise CheckpointError(f"checkpoint holds a {dec.kind!r} decoder, not {kind!r}")
        return dec
    raise ConfigError(f"unknown decoder kind {kind!r}")


# -- Monte Carlo -------------------------------------------------------------

@dataclass
class TrialResult:
    frames: int = 0
    bit_errors: int = 0
    block_errors: int = 0
    info_bits: int = 0
    p_out_sum: float = 0.0
    rho: float = float("nan")
    wall_time: float = 0.0

    @property
    def ber(self):
        return self.bit_errors / self.info_bits if self.info_bits else 0.0

    @property
    def bler(self):
        return self.block_errors / self.frames if self.frames else 0.0

    @property
    def p_out(self):
        return self.p_out_sum / self.frames if self.frames else 0.0

    def add(self, other):
        self.frames += other.frames
        self.bit_errors += other.bit_errors
        self.block_errors += other.block_errors
        self.info_bits += other.info_bits
        self.p_out_sum += other.p_out_sum

    def as_row(self):
        return {"frames": self.frames, "bit_errors": self.bit_errors,
                "block_errors": self.block_errors, "ber": self.ber, "bler": self.bler,
                "p_out_mw": self.p_out, "rho": self.rho}


def tally(bits, batch):
    """Error counts of decoded ``bits`` against ``batch.info_bits``."""
    wrong = np.asarray(bits) != batch.info_bits
    per_frame = wrong.sum(axis=1)
    return TrialResult(frames=len(per_frame), bit_errors=int(per_frame.sum()),
                       block_errors=int(np.count_nonzero(per_frame)),
                       info_bits=int(wrong.size), p_out_sum=float(np.sum(batch.p_out)))


class LinkTrial:
    """Chunk simulator: one set of frames seen by several decoders."""

    def __init__(self, link, decoders):
        self.link = link
        self.decoders = decoders if isinstance(decoders, dict) else {"decoder": decoders}

    def __call__(self, rng, count):
        batch = self.link.frames(rng, count)
        return {name: tally(dec.decode(batch.llrs), batch) for name, dec in self.decoders.items()}


class FrameTrial:
    """Chunk simulator from a frame source ``source(rng, count) -> FrameBatch``."""

    def __init__(self, source, decoders):
        self.source = source
        self.decoders = decoders

    def __call__(self, rng, count):
        batch = self.source(rng, count)
        return {name: tally(dec(batch.llrs), batch) for name, dec in self.decoders.items()}


def _run_chunk(trial, seed, index, count):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    return trial(rng, count)


def run_trials(trial, frames, seed=0, chunk=500, max_block_errors=100, workers=1):
    """Simulate ``trial`` chunk by chunk; returns ``{name: TrialResult}``.

    Stops after the first chunk at which every entry has at least
    ``max_block_errors`` block errors, or when ``frames`` are used up.
    """
    start = time.perf_counter()
    sizes = [min(chunk, frames - i) for i in range(0, frames, chunk)]
    totals = None
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        index = 0
        while index < len(sizes):
            wave = list(range(index, min(index + (workers if pool else 1), len(sizes))))
            if pool:
                futures = [pool.submit(_run_chunk, trial, seed, i, sizes[i]) for i in wave]
                outputs = [f.result() for f in futures]
            else:
                outputs = [_run_chunk(trial, seed, i, sizes[i]) for i in wave]
            done = False
            for out in outputs:
                if totals is None:
                    totals = {name: TrialResult() for name in out}
                for name, res in out.items():
                    totals[name].add(res)
                index += 1
                if max_block_errors is not None and all(
                        r.block_errors >= max_block_errors for r in totals.values()):
                    done = True
                    break
            if done:
                break
    finally:
        if pool:
            pool.shutdown()
    elapsed = time.perf_counter() - start
    for r in totals.values():
        r.wall_time = elapsed
    return totals


def run_monte_carlo(cfg, trial=None, workers=None, link=None, decoder=None):
    """Monte Carlo BER/BLER of the configured link and decoder."""
    s = cfg.sim
    if trial is None:
        link = link or build_link(cfg)
        decoder = decoder or build_decoder(cfg, link.mask)
        trial = LinkTrial(link, {"decoder": decoder})
    out = run_trials(trial, s.frames, s.seed, s.chunk, s.max_block_errors, workers or s.workers)
    res = next(iter(out.values())) if len(out) == 1 else out
    if link is not None and isinstance(res, TrialResult):
        res.rho = link.rho
    return res


def run_paired(link, decoders, frames, seed=0, chunk=500, max_block_errors=100, workers=1):
    """All ``decoders`` (a name -> Decoder dict) on identical frames."""
    out = run_trials(LinkTrial(link, decoders), frames, seed, chunk, max_block_errors, workers)
    for r in out.values():
        r.rho = link.rho
    return out


# -- energy sweeps -------------------------------------------------------------

def expected_p_out(link_factory, rho, seed=12345, frames=200):
    """Mean harvested power of ``link_factory(rho)`` on fixed pilot frames."""
    link = link_factory(rho)
    return float(np.mean(link.frames(np.random.default_rng(seed), frames).p_out))


def solve_rho(link_factory, p_targ, tol=1e-6, rho_min=1e-6, pilot_frames=200, seed=12345):
    """Largest splitting factor whose mean harvested power reaches ``p_targ``.

    Harvested power falls as ``rho`` grows, so this is a bisection.  Returns
    ``None`` when even ``rho_min`` cannot reach the target.
    """
    f = lambda r: expected_p_out(link_factory, r, seed, pilot_frames)  # noqa: E731
    if f(1.0) >= p_targ:
        return 1.0
    if f(rho_min) < p_targ:
        return None
    lo, hi = rho_min, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) >= p_targ:
            lo = mid
        else:
            hi = mid
    return lo


def sweep_energy(cfg, targets, workers=None, harvester=None):
    """BER against harvested power for a list of targets.

    Fixed systems solve for ``rho`` by bisection; learned systems
    (``system.kind == 'learned'`` with a ``train`` section) are retrained per
    target.  Unreachable targets produce rows with ``feasible = 0``.
    """
    targets = list(targets)
    if len(targets) < 2:
        raise ConfigError("sweep_energy needs at least two targets")
    harvester = harvester or build_harvester(cfg)
    rows = []
    for p_targ in targets:
        if cfg.system.kind == "learned" and cfg.train:
            rows.append(_sweep_learned_point(cfg, p_targ, harvester, workers))
            continue
        rho = solve_rho(lambda r: build_link(cfg, rho=r, harvester=harvester), p_targ)
        if rho is None:
            rows.append({"p_targ_mw": p_targ, "feasible": 0, "rho": "", "p_out_mw": "",
                         "ber": "", "bler": "", "frames": 0})
            continue
        res = run_monte_carlo(cfg, workers=workers, link=build_link(cfg, rho=rho, harvester=harvester))
        rows.append({"p_targ_mw": p_targ, "feasible": 1, "rho": rho, "p_out_mw": res.p_out,
                     "ber": res.ber, "bler": res.bler, "frames": res.frames})
    return rows


def _sweep_learned_point(cfg, p_targ, harvester, workers):
    from .learn import E2eConfig, LossWeights, train_end_to_end

    tcfg = dict(cfg.train)
    tcfg.pop("mode", None)
    tcfg.pop("kinds", None)
    weights = dict(tcfg.pop("weights", {}))
    weights["p_targ"] = p_targ
    weights.setdefault("r_targ", cfg.code.k / cfg.code.n)
    e2e = E2eConfig(weights=LossWeights(**weights), n_bits=cfg.code.n, k_info=cfg.code.k,
                    order=cfg.modulation.order, channel=cfg.channel.kind,
                    tx_dbm=cfg.power.tx_dbm, noise_dbm=cfg.channel.noise_dbm,
                    noise_placement=cfg.channel.placement,
                    conv_noise_mw=cfg.channel.conv_noise_mw, **tcfg)
    state, _ = train_end_to_end(e2e, harvester)
    link = state.link(harvester)
    res = run_monte_carlo(cfg, workers=workers, link=link, decoder=state.decoder())
    return {"p_targ_mw": p_targ, "feasible": 1, "rho": state.rho, "p_out_mw": res.p_out,
            "ber": res.ber, "bler": res.bler, "frames": res.frames}


# -- complexity ---------------------------------------------------------------

def count_ops(kind, n_bits=64, iterations=6, k_h=8, layers=3):
    """Closed-form per-frame operation counts of the BP-family decoders."""
    nn_ = n_bits * log2_exact(n_bits)
    t = iterations
    if kind == "bp":
        return {"additions": 2 * t * nn_, "multiplications": 0, "memory": 0}
    if kind == "dnn":
        v = 2 * t * nn_
        return {"additions": v, "multiplications": v, "memory": v}
    if kind == "hyper":
        mults = 2 * t * nn_ + k_h * t * nn_ + (layers - 1) * k_h ** 2 * t + k_h * t
        return {"additions": 2 * t * nn_, "multiplications": mults, "memory": 3 * nn_ + k_h * layers}
    raise ConfigError(f"count_ops supports bp, dnn and hyper, not {kind!r}")


def instrumented_ops(kind, n_bits=64, iterations=6, k_h=8, layers=3, seed=0):
    """Counts taken from a decode call on one random frame."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(n_bits, dtype=bool)
    mask[n_bits // 2:] = True
    llr = rng.normal(1.0, 2.0, n_bits)
    counter = OpCounters()
    if kind == "bp":
        BpDecoder(mask, iterations).decode(llr, counter)
    elif kind == "dnn":
        DnnBpDecoder.identity(mask, iterations).decode(llr, counter)
    elif kind == "hyper":
        net = HyperNet(n_bits, iterations, k_h, layers).init_params(rng)
        HyperBpDecoder(mask, iterations, net).decode(llr, counter)
    else:
        raise ConfigError(f"instrumented_ops supports bp, dnn and hyper, not {kind!r}")
    return counter.as_dict()


# -- bounds -------------------------------------------------------------------

def shift_bound(curve, rho):
    """Move the SNR axis of ``(snr_db, bler)`` pairs by ``10 log10 rho`` dB.

    Converts a bound stated for the transmit SNR into one for the
    information branch after the splitter.
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    arr = np.asarray(curve, dtype=float).reshape(-1, 2)
    out = arr.copy()
    out[:, 0] += 10.0 * np.log10(rho)
    return out


def biawgn_dispersion(snr, nodes=120):
    """Capacity (bits) and dispersion (bits^2) of BPSK at per-bit SNR ``snr``."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    llr = 2.0 * snr + 2.0 * np.sqrt(snr) * x
    info = 1.0 - np.logaddexp(0.0, -llr) / np.log(2.0)
    cap = float(np.sum(w * info))
    return cap, float(np.sum(w * (info - cap) ** 2))


def normal_approx_bler(snr_db, n, k):
    """Normal-approximation BLER proxy for BPSK/QPSK bits (not an exact PPV bound).

    ``snr_db`` is the per-bit SNR, which equals ``P_tr / P_n`` for Gray QPSK.
    """
    out = []
    for s in np.atleast_1d(snr_db):
        cap, disp = biawgn_dispersion(10.0 ** (s / 10.0))
        arg = (n * cap - k + 0.5 * np.log2(n)) / np.sqrt(max(n * disp, 1e-300))
        out.append(float(stats.norm.sf(arg)))
    return np.array(out)


def load_curve(path):
    """Two-column ``snr_db, bler`` text/CSV file; ``#`` lines are comments."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except (ValueError, IndexError):
            continue
    if not rows:
        raise ConfigError(f"no (snr_db, bler) rows in {path}")
    return np.array(rows)


# -- adaptability ------------------------------------------------------------

def adaptability_matrix(cfg, hyper_checkpoint, dnn_checkpoint, t_tests=(3, 6), workers=None):
    """BER of plain BP, unrolled (flat) BP and the hypernetwork decoder per ``T_test``."""
    for p in (hyper_checkpoint, dnn_checkpoint):
        if not p or not Path(p).exists():
            raise CheckpointError(f"missing decoder checkpoint {p!r}")
    link = build_link(cfg)
    decoders = {}
    for t in t_tests:
        decoders[("bp", t)] = BpDecoder(link.mask, t)
        decoders[("dnn", t)] = load_decoder(dnn_checkpoint, mask=link.mask, iterations=t)
        decoders[("hyper", t)] = load_decoder(hyper_checkpoint, mask=link.mask, iterations=t)
    s = cfg.sim
    named = {f"{k}@{t}": d for (k, t), d in decoders.items()}
    res = run_paired(link, named, s.frames, s.seed, s.chunk, s.max_block_errors,
                     workers or s.workers)
    rows = []
    for (k, t) in decoders:
        r = res[f"{k}@{t}"]
        rows.append({"decoder": k, "t_test": t, "ber": r.ber, "bler": r.bler, "frames": r.frames})
    return rows


# -- CSV ----------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, kind, rows, columns=None):
    """Write rows under a ``# polariden-csv v1 kind=...`` header line."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    lines = [f"# polariden-csv v{CSV_VERSION} kind={kind}", ",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c, "")) for c in columns))
    text = "\n".join(lines) + "\n"
    if path is None or str(path) == "-":
        return text
    Path(path).write_text(text)
    return text


def read_csv(path):
    """Rows of a file written by :func:`write_csv` as dicts of strings."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


class HardChannelSource:
    """Frame source of uncoded bits through a binary symmetric channel."""

    def __init__(self, n_bits, flip):
        self.n_bits = int(n_bits)
        self.flip = float(flip)

    def __call__(self, rng, count):
        b = rng.integers(0, 2, size=(count, self.n_bits), dtype=np.uint8)
        r = b ^ (rng.random((count, self.n_bits)) < self.flip)
        return FrameBatch(b, np.where(r == 1, -1.0, 1.0), np.zeros(count), np.zeros(count))


def hard_decision(llrs):
    """Identity "decoder" for uncoded frames."""
    return (np.asarray(llrs) < 0).astype(np.uint8)

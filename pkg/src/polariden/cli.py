"""Command line entry point (``polariden``).

Every subcommand writes CSV to ``--out`` (``-`` for stdout) except ``train``
and ``fit-eh``, which write checkpoint files and a CSV next to them.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .decoders import save_decoder
from .errors import CheckpointError, ConfigError, FitError
from .modem import index_bits, qam_constellation
from .phy import EhReference, eh_fit, eh_reference_samples, save_surrogate
from .polar import construct


def _config(args):
    cfg = H.load_config(args.config) if getattr(args, "config", None) else H.SimConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.with_changes(sim=changes) if changes else cfg


def _emit(args, kind, rows, columns=None):
    text = H.write_csv(None, kind, rows, columns)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)


def cmd_construct(args):
    cfg = _config(args)
    c = cfg.code
    code = construct(args.kind or c.construction, args.n or c.n, args.k or c.k,
                     c.design_snr_db if args.design_snr_db is None else args.design_snr_db)
    rows = [{"index": i, "info": int(f)} for i, f in enumerate(code.frozen_mask)]
    _emit(args, "construction", rows, ["index", "info"])


def cmd_simulate(args):
    cfg = _config(args)
    res = H.run_monte_carlo(cfg)
    row = {"decoder": cfg.decoder.kind, "iterations": cfg.decoder.iterations,
           "tx_dbm": cfg.power.tx_dbm, **res.as_row()}
    _emit(args, "trial", [row])


def cmd_sweep(args):
    cfg = _config(args)
    targets = [float(t) for t in args.targets.split(",")]
    rows = H.sweep_energy(cfg, targets)
    _emit(args, "energy-sweep", rows,
          ["p_targ_mw", "feasible", "rho", "p_out_mw", "ber", "bler", "frames"])


def cmd_train(args):
    from .learn import DecoderTrainConfig, E2eConfig, LossWeights, train_dnn_decoder, \
        train_end_to_end, train_hyper_decoder

    cfg = _config(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    t = dict(cfg.train)
    mode = t.pop("mode", "decoder")
    seed = cfg.sim.seed
    if mode == "decoder":
        kinds = t.pop("kinds", ["hyper", "dnn"])
        width, depth = t.pop("hyper_width", 8), t.pop("hyper_depth", 3)
        link = H.build_link(cfg)
        for kind in kinds:
            dcfg = DecoderTrainConfig(seed=seed, **{"iteration_loss": "all" if kind == "hyper" else "final", **t})
            if kind == "hyper":
                dec, hist = train_hyper_decoder(link, dcfg, width, depth)
            elif kind == "dnn":
                dec, hist = train_dnn_decoder(link, dcfg)
            else:
                raise ConfigError(f"cannot train decoder kind {kind!r}")
            save_decoder(out / f"{kind}.json", dec)
            H.write_csv(out / f"{kind}_history.csv", "decoder-history", hist)
        return
    if mode != "e2e":
        raise ConfigError(f"train.mode must be 'decoder' or 'e2e', got {mode!r}")
    weights = dict(t.pop("weights", {}))
    weights.setdefault("p_targ", cfg.energy.p_targ_mw)
    weights.setdefault("r_targ", cfg.code.k / cfg.code.n)
    e2e = E2eConfig(weights=LossWeights(**weights), n_bits=cfg.code.n, k_info=cfg.code.k,
                    order=cfg.modulation.order, channel=cfg.channel.kind,
                    tx_dbm=cfg.power.tx_dbm, noise_dbm=cfg.channel.noise_dbm,
                    noise_placement=cfg.channel.placement,
                    conv_noise_mw=cfg.channel.conv_noise_mw, seed=seed, **t)
    harvester = H.build_harvester(cfg)
    if not hasattr(harvester, "forward"):
        raise ConfigError("end-to-end training needs energy.model 'surrogate' (run fit-eh first)")
    state, hist = train_end_to_end(e2e, harvester, abort_path=out / "abort_state.json")
    state.save(out / "system.json")
    H.write_csv(out / "history.csv", "train-history", hist,
                ["epoch", "loss", "ber", "p_out_mw", "rate"])


def cmd_adapt(args):
    cfg = _config(args)
    t_tests = tuple(int(x) for x in args.t_test.split(","))
    rows = H.adaptability_matrix(cfg, args.hyper, args.dnn, t_tests)
    _emit(args, "adaptability", rows, ["decoder", "t_test", "ber", "bler", "frames"])


def cmd_count_ops(args):
    kinds = ["bp", "dnn", "hyper"] if args.kind == "all" else [args.kind]
    rows = []
    for kind in kinds:
        f = H.count_ops(kind, args.n, args.t, args.kh, args.layers)
        r = H.instrumented_ops(kind, args.n, args.t, args.kh, args.layers)
        rows.append({"decoder": kind, "n": args.n, "t": args.t,
                     **{k: v for k, v in f.items()},
                     **{f"runtime_{k}": v for k, v in r.items()}})
    _emit(args, "op-counts", rows)


def cmd_fit_eh(args):
    cfg = _config(args)
    e = cfg.energy
    ref = EhReference(e.p_sat, e.a, e.b)
    samples = eh_reference_samples(args.samples, args.p_max, ref)
    try:
        model = eh_fit(samples, seed=cfg.sim.seed)
    except FitError as exc:
        print(f"fit-eh: {exc}", file=sys.stderr)
        return 3
    out = Path(args.out or "eh_surrogate.json")
    save_surrogate(out, model)
    grid = np.linspace(0.0, args.p_max, 101)
    rows = [{"p_in_mw": p, "reference_mw": r, "surrogate_mw": s}
            for p, r, s in zip(grid, ref(grid), model(grid))]
    H.write_csv(out.with_suffix(".csv"), "eh-fit", rows)
    print(f"max-abs error {model.fit_error:.3g} mW", file=sys.stderr)
    return 0


def cmd_export_constellation(args):
    cfg = _config(args)
    if cfg.system.kind == "learned":
        from .learn import TrainState

        const = TrainState.load(cfg.system.checkpoint).constellation()
    else:
        const = qam_constellation(cfg.modulation.order, cfg.tx_mw)
    labels = index_bits(const.order)
    rows = [{"index": i, "bits": "".join(map(str, labels[i])), "re": re, "im": im}
            for i, re, im in const.to_csv_rows()]
    _emit(args, "constellation", rows, ["index", "bits", "re", "im"])


def cmd_shift_bound(args):
    if args.curve:
        curve = H.load_curve(args.curve)
        label = "external"
    else:
        snr = np.arange(args.snr_min, args.snr_max + 1e-9, args.snr_step)
        curve = np.stack([snr, H.normal_approx_bler(snr, args.n, args.k)], axis=1)
        label = "normal-approximation-proxy"
    shifted = H.shift_bound(curve, args.rho)
    rows = [{"snr_db": s0, "shifted_snr_db": s1, "bler": b, "source": label}
            for (s0, b), (s1, _) in zip(curve, shifted)]
    _emit(args, "bound", rows)


def build_parser():
    p = argparse.ArgumentParser(prog="polariden", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", help="YAML configuration file")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--workers", type=int)
        sp.add_argument("--out", help="output path ('-' for stdout)")
        sp.set_defaults(func=func)
        return sp

    sp = add("construct", cmd_construct, "frozen/info mask of a classical construction")
    sp.add_argument("--kind", choices=["ga", "pw", "5g"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--design-snr-db", type=float)
    add("simulate", cmd_simulate, "Monte Carlo BER/BLER of one configuration")
    sp = add("sweep", cmd_sweep, "BER against harvested-power targets")
    sp.add_argument("--targets", required=True, help="comma separated P_targ values in mW")
    add("train", cmd_train, "train decoders or the end-to-end system")
    sp = add("adapt", cmd_adapt, "BER grid over decoder kind and test iterations")
    sp.add_argument("--hyper", required=True, help="hypernetwork decoder checkpoint")
    sp.add_argument("--dnn", required=True, help="unrolled BP decoder checkpoint")
    sp.add_argument("--t-test", default="3,6")
    sp = add("count-ops", cmd_count_ops, "operation counts (closed form and runtime)", config=False)
    sp.add_argument("--kind", default="all", choices=["all", "bp", "dnn", "hyper"])
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--t", type=int, default=6)
    sp.add_argument("--kh", type=int, default=8)
    sp.add_argument("--layers", type=int, default=3)
    sp = add("fit-eh", cmd_fit_eh, "fit the harvester surrogate to the reference curve")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--p-max", type=float, default=10.0)
    add("export-constellation", cmd_export_constellation, "constellation points as CSV")
    sp = add("shift-bound", cmd_shift_bound, "shift a BLER bound curve by 10 log10 rho", config=False)
    sp.add_argument("--rho", type=float, required=True)
    sp.add_argument("--curve", help="two-column snr_db,bler file (default: normal-approximation proxy)")
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--k", type=int, default=32)
    sp.add_argument("--snr-min", type=float, default=0.0)
    sp.add_argument("--snr-max", type=float, default=8.0)
    sp.add_argument("--snr-step", type=float, default=0.5)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"polariden {args.command}: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())

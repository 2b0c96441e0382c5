import numpy as np
import pytest

from polariden import harness as H
from polariden.decoders import BpDecoder, ScDecoder, SclDecoder
from polariden.errors import CheckpointError, ConfigError, InvalidInputError


def cfg_with(**sections):
    return H.SimConfig().with_changes(**sections)


# -- configuration -----------------------------------------------------------

def test_default_config_is_valid():
    cfg = H.SimConfig()
    assert cfg.code.n == 64 and cfg.decoder.iterations == 50
    assert H.SimConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [
    {"code": {"n": 48}},
    {"code": {"k": 0}},
    {"code": {"construction": "rm"}},
    {"decoder": {"kind": "ldpc"}},
    {"decoder": {"iterations": 0}},
    {"modulation": {"order": 8}},
    {"modulation": {"order": 6}},
    {"channel": {"kind": "rician"}},
    {"power": {"rho": 1.5}},
    {"power": {"rho": 0.0}},
    {"energy": {"model": "diode"}},
    {"sim": {"frames": 0}},
    {"system": {"kind": "learned"}},
])
def test_config_validation_errors(bad):
    with pytest.raises(ConfigError):
        H.SimConfig().with_changes(**bad)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        H.SimConfig.from_dict({"coding": {}})
    with pytest.raises(ConfigError):
        H.SimConfig.from_dict({"code": {"length": 64}})
    path = tmp_path / "c.yaml"
    path.write_text("code: {n: 32, k: 16}\nsim: {frames: 100}\n")
    cfg = H.load_config(path)
    assert cfg.code.n == 32 and cfg.sim.frames == 100
    path.write_text("code: [1, 2\n")
    with pytest.raises(ConfigError):
        H.load_config(path)
    with pytest.raises(ConfigError):
        H.load_config(tmp_path / "missing.yaml")


def test_rho_trained_needs_learned_system():
    cfg = cfg_with(power={"rho": "trained"})
    with pytest.raises(ConfigError):
        H.build_link(cfg)


def test_dnn_decoder_needs_checkpoint():
    cfg = cfg_with(decoder={"kind": "dnn"})
    with pytest.raises(CheckpointError):
        H.build_decoder(cfg, H.build_code(cfg).frozen_mask)


# -- Monte Carlo ------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["bp", "sc", "scl"])
def test_noiseless_channel_has_no_errors(kind):
    cfg = cfg_with(channel={"noise_dbm": None}, decoder={"kind": kind, "iterations": 5},
                   sim={"frames": 300, "chunk": 100})
    res = H.run_monte_carlo(cfg)
    assert res.frames == 300 and res.ber == 0 and res.bler == 0


def test_hard_channel_identity_decoder():
    trial = H.FrameTrial(H.HardChannelSource(64, 0.1), {"id": H.hard_decision})
    res = H.run_trials(trial, 2000, seed=3, chunk=500, max_block_errors=None)["id"]
    assert abs(res.ber - 0.1) < 0.01
    assert res.bler >= res.ber


def test_scl_never_worse_than_sc_on_paired_frames():
    cfg = cfg_with(power={"tx_dbm": 1.0})
    link = H.build_link(cfg)
    res = H.run_paired(link, {"sc": ScDecoder(link.mask), "scl": SclDecoder(link.mask, 2)},
                       frames=4000, seed=1, chunk=1000, max_block_errors=None)
    assert res["scl"].block_errors <= res["sc"].block_errors
    assert res["sc"].block_errors > 0


def test_more_bp_iterations_help_on_paired_frames():
    link = H.build_link(H.SimConfig())
    res = H.run_paired(link, {"t6": BpDecoder(link.mask, 6), "t3": BpDecoder(link.mask, 3)},
                       frames=3000, seed=2, chunk=1000, max_block_errors=None)
    assert res["t6"].ber <= res["t3"].ber


def test_stopping_rule():
    link = H.build_link(cfg_with(power={"tx_dbm": -2.0}))
    res = H.run_paired(link, {"bp": BpDecoder(link.mask, 5)}, frames=100000, seed=0,
                       chunk=200, max_block_errors=100)["bp"]
    assert 100 <= res.block_errors and res.frames < 100000 and res.frames % 200 == 0


def test_serial_and_parallel_agree():
    cfg = cfg_with(decoder={"iterations": 5}, sim={"frames": 1200, "chunk": 300,
                                                   "max_block_errors": None})
    serial = H.run_monte_carlo(cfg, workers=1)
    parallel = H.run_monte_carlo(cfg, workers=2)
    assert serial.as_row() == parallel.as_row()


def test_trial_result_invariants():
    cfg = cfg_with(power={"tx_dbm": 0.0}, decoder={"iterations": 5},
                   sim={"frames": 600, "chunk": 300})
    res = H.run_monte_carlo(cfg)
    assert res.ber == res.bit_errors / (res.frames * cfg.code.k)
    assert res.bler >= res.ber
    assert res.rho == 0.8 and res.p_out > 0


def test_csv_bytes_reproducible(tmp_path):
    cfg = cfg_with(decoder={"iterations": 5}, sim={"frames": 600, "chunk": 200, "seed": 9})
    texts = []
    for i in range(2):
        res = H.run_monte_carlo(cfg)
        path = tmp_path / f"run{i}.csv"
        H.write_csv(path, "trial", [res.as_row()])
        texts.append(path.read_bytes())
    assert texts[0] == texts[1]
    assert texts[0].startswith(b"# polariden-csv v1 kind=trial\n")
    rows = H.read_csv(tmp_path / "run0.csv")
    assert int(rows[0]["frames"]) == 600


# -- energy sweeps ----------------------------------------------------------------

def test_sweep_anchor_and_infeasible_marker():
    cfg = cfg_with(power={"tx_dbm": 3.0}, decoder={"kind": "sc"},
                   sim={"frames": 400, "chunk": 200})
    rows = H.sweep_energy(cfg, [0.0, 0.5])
    anchor, infeasible = rows
    assert anchor["feasible"] == 1 and anchor["rho"] == 1.0 and anchor["p_out_mw"] == pytest.approx(0.0, abs=1e-12)
    assert infeasible["feasible"] == 0
    with pytest.raises(ConfigError):
        H.sweep_energy(cfg, [0.01])


def test_solve_rho_hits_target():
    cfg = H.SimConfig()
    factory = lambda r: H.build_link(cfg, rho=r)  # noqa: E731
    rho = H.solve_rho(factory, 0.03)
    assert 0 < rho < 1
    assert H.expected_p_out(factory, rho) >= 0.03
    assert H.expected_p_out(factory, min(rho + 1e-4, 1.0)) < 0.03 + 1e-4


# -- complexity -------------------------------------------------------------------

def test_count_ops_table_values():
    assert H.count_ops("bp", 64, 50)["additions"] == 38400
    dnn = H.count_ops("dnn", 64, 6)
    assert dnn == {"additions": 4608, "multiplications": 4608, "memory": 4608}
    hyper = H.count_ops("hyper", 64, 6, 8, 3)
    assert hyper["multiplications"] == 23856 and hyper["memory"] == 1176
    with pytest.raises(ConfigError):
        H.count_ops("sc")


@pytest.mark.parametrize("kind", ["bp", "dnn", "hyper"])
@pytest.mark.parametrize("t", [6, 50])
def test_runtime_counters_match_formulas(kind, t):
    formula = H.count_ops(kind, 64, t, 8, 3)
    runtime = H.instrumented_ops(kind, 64, t, 8, 3)
    for key in ("additions", "multiplications", "memory"):
        if kind == "bp" and key != "additions":
            continue
        assert runtime[key] == formula[key], key


# -- bounds -------------------------------------------------------------------------

def test_shift_bound():
    curve = np.array([[0.0, 0.5], [1.0, 0.1], [2.0, 0.01]])
    assert np.array_equal(H.shift_bound(curve, 1.0), curve)
    shifted = H.shift_bound(curve, 0.5)
    assert np.allclose(shifted[:, 0] - curve[:, 0], -3.0103, atol=1e-4)
    assert np.array_equal(shifted[:, 1], curve[:, 1])
    assert np.all(np.diff(shifted[:, 0]) > 0) and np.all(np.diff(shifted[:, 1]) < 0)
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            H.shift_bound(curve, bad)


def test_normal_approximation_proxy():
    cap, disp = H.biawgn_dispersion(1e4)
    assert cap == pytest.approx(1.0, abs=1e-6) and disp < 1e-6
    assert H.biawgn_dispersion(1.0)[0] == pytest.approx(0.4859, abs=2e-3)
    bler = H.normal_approx_bler(np.arange(0, 8, 0.5), 64, 32)
    assert np.all(np.diff(bler) < 0) and np.all((bler > 0) & (bler < 1))


def test_load_curve(tmp_path):
    path = tmp_path / "ppv.txt"
    path.write_text("# snr bler\n0.0, 0.3\n1.0 0.05\nbad line\n")
    assert H.load_curve(path).tolist() == [[0.0, 0.3], [1.0, 0.05]]
    path.write_text("# empty\n")
    with pytest.raises(ConfigError):
        H.load_curve(path)


def test_adaptability_needs_checkpoints(tmp_path):
    with pytest.raises(CheckpointError):
        H.adaptability_matrix(H.SimConfig(), tmp_path / "h.json", tmp_path / "d.json")

import math

import numpy as np
import pytest

from polariden import autodiff as ad
from polariden.decoders import BpWeights, _bp_run, bp_decode
from polariden.errors import ConfigError, InvalidInputError, NumericGuardError
from polariden.learn import (Adam, DecoderTrainConfig, E2eConfig, LossWeights, Sgd, TrainState,
                             bp_unrolled, loss_rate, loss_total, loss_wet, loss_wit,
                             loss_wit_logits, step, train_dnn_decoder, train_end_to_end,
                             train_hyper_decoder)
from polariden.link import Link
from polariden.modem import qam_constellation
from polariden.phy import EhReference, dbm_to_mw
from polariden.polar import construct_ga


def scripted_ce(b, p, eps=1e-7):
    total = 0.0
    for bi, pi in zip(b, p):
        pi = min(max(pi, eps), 1 - eps)
        total += bi * math.log(pi) + (1 - bi) * math.log(1 - pi)
    return total


def scripted_total(bits, probs, p_out, f_soft, w):
    acc = 0.0
    for b, p, po in zip(bits, probs, p_out):
        gap = w.p_targ - po
        acc += -scripted_ce(b, p) + w.beta1 * w.lam / po + w.beta2 * gap + w.beta3 * gap * gap
    rate = sum(1 / (1 + math.exp(-f)) for f in f_soft) / len(f_soft)
    return acc / len(bits) + w.beta4 * (rate - w.r_targ) ** 2


# -- loss terms ---------------------------------------------------------------

def test_loss_weights_defaults_and_validation():
    w = LossWeights(p_targ=0.06)
    assert w.lam == pytest.approx(0.0006) and w.batch_size == 256
    assert (w.beta1, w.beta2, w.beta3, w.beta4) == (1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        LossWeights(p_targ=0.06, beta3=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(p_targ=0.06, r_targ=0.0)


def test_loss_wit_examples(rng):
    b = np.array([1.0, 0.0, 1.0])
    assert loss_wit(b, b).value == pytest.approx(3 * math.log(1 - 1e-7))
    assert loss_wit(np.array([1.0]), np.array([0.5])).value == pytest.approx(math.log(0.5))
    bits = rng.integers(0, 2, 20).astype(float)
    probs = rng.random(20)
    assert loss_wit(bits, probs).value == pytest.approx(scripted_ce(bits, probs), rel=1e-12)
    with pytest.raises(InvalidInputError):
        loss_wit(np.ones(3), np.ones(4) * 0.5)


def test_logit_form_matches_probability_form(rng):
    bits = rng.integers(0, 2, (6, 10)).astype(float)
    llr = rng.normal(scale=3.0, size=(6, 10))
    p_one = 1 / (1 + np.exp(llr))
    assert np.allclose(loss_wit_logits(bits, llr).value, loss_wit(bits, p_one).value, rtol=1e-9)


def test_loss_wet_examples():
    w = LossWeights(p_targ=0.06, lam=0.01)
    assert loss_wet(0.06, w).value == pytest.approx(0.01 / 0.06)
    assert loss_wet(1.06, LossWeights(p_targ=0.06, lam=0.0)).value == pytest.approx(0.0, abs=1e-12)
    assert loss_wet(0.05, w).value == pytest.approx(0.2101)
    with pytest.raises(NumericGuardError):
        loss_wet(np.nan, w)


def test_loss_wet_can_be_negative():
    assert loss_wet(0.5, LossWeights(p_targ=0.06, lam=0.0)).value < 0


def test_loss_rate_examples(rng):
    w = LossWeights(p_targ=0.05)
    assert loss_rate(np.zeros(16), w).value == 0.0
    assert loss_rate(np.full(16, math.log(0.6 / 0.4)), w).value == pytest.approx(0.01)
    f = rng.normal(size=16)
    r = sum(1 / (1 + math.exp(-x)) for x in f) / 16
    assert loss_rate(f, w).value == pytest.approx((r - 0.5) ** 2, rel=1e-12)


def test_loss_rate_hand_derivative(rng):
    w = LossWeights(p_targ=0.05, r_targ=0.4)
    f = rng.normal(size=32)
    tape = ad.Tape()
    x = tape.variable(f)
    (g,) = tape.gradient(loss_rate(x, w), [x])
    s = 1 / (1 + np.exp(-f))
    assert np.allclose(g, 2 * (s.mean() - 0.4) * s * (1 - s) / 32, rtol=1e-12)


def test_loss_total_examples(rng):
    w = LossWeights(p_targ=0.05, lam=0.0)
    bits = np.array([[1.0, 0.0, 1.0]])
    perfect = loss_total(loss_wit(bits, bits), np.array([0.05]), np.zeros(8), w)
    assert perfect.value == pytest.approx(0.0, abs=1e-5)

    ce_only = LossWeights(p_targ=0.05, lam=0.0, beta2=0.0, beta3=0.0, beta4=0.0)
    bits = rng.integers(0, 2, (5, 7)).astype(float)
    probs = rng.random((5, 7))
    wit = loss_wit(bits, probs)
    got = loss_total(wit, rng.uniform(0.01, 0.1, 5), rng.normal(size=8), ce_only)
    assert got.value == pytest.approx(-np.mean(wit.value), rel=1e-12)

    w = LossWeights(p_targ=0.06, r_targ=0.45, lam=0.01, beta1=0.5, beta2=2.0, beta3=3.0, beta4=4.0)
    p_out = rng.uniform(0.01, 0.1, 5)
    f_soft = rng.normal(size=8)
    got = loss_total(loss_wit(bits, probs), p_out, f_soft, w).value
    assert got == pytest.approx(scripted_total(bits, probs, p_out, f_soft, w), rel=1e-12)


# -- optimizers ---------------------------------------------------------------

def test_sgd_and_adam_steps():
    params = {"w": np.array([1.0, 2.0])}
    Sgd(0.005).step(params, {"w": np.zeros(2)})
    assert params["w"].tolist() == [1.0, 2.0]
    step(Sgd(0.005), params, {"w": np.ones(2)})
    assert np.allclose(params["w"], [0.995, 1.995])

    params = {"w": np.array([1.0])}
    opt = Adam(0.005)
    opt.step(params, {"w": np.array([1.0])})
    assert 1.0 - params["w"][0] == pytest.approx(0.005, rel=1e-6)
    params = {"w": np.array([1.0])}
    Adam(0.005).step(params, {"w": np.array([0.0])})
    assert params["w"][0] == 1.0


def test_optimizer_guards():
    params = {"w": np.ones(2)}
    with pytest.raises(NumericGuardError, match="w"):
        Adam().step(params, {"w": np.array([1.0, np.nan])})
    with pytest.raises(InvalidInputError):
        Sgd().step(params, {"w": np.ones(3)})
    with pytest.raises(InvalidInputError):
        Sgd().step(params, {"v": np.ones(2)})


# -- differentiable BP ------------------------------------------------------------

def test_tensor_bp_equals_numpy_bp(rng):
    mask = construct_ga(32, 16, 2.0)
    llrs = rng.normal(1.0, 3.0, (16, 32))
    r0 = np.broadcast_to(np.where(mask, 0.0, 30.0), llrs.shape)
    ours = bp_unrolled(llrs, r0, 4)
    ref, _, _ = _bp_run(llrs, mask, 4, lambda t: None)
    assert np.array_equal(ours[-1].value, ref)
    alphas = [rng.uniform(0.5, 1.5, (5, 32)) for _ in range(4)]
    betas = [rng.uniform(0.5, 1.5, (5, 32)) for _ in range(4)]
    ours = bp_unrolled(llrs, r0, 4, lambda t: (ad.as_tensor(alphas[t - 1]), ad.as_tensor(betas[t - 1])))
    ws = [BpWeights(a, b) for a, b in zip(alphas, betas)]
    ref, _, _ = _bp_run(llrs, mask, 4, lambda t: ws[t - 1])
    assert np.array_equal(ours[-1].value, ref)
    assert len(ours) == 4


# -- decoder training ------------------------------------------------------------

def _awgn_link(rho=0.8):
    mask = construct_ga(64, 32, 2.0)
    tx = float(dbm_to_mw(3.0))
    return Link(mask, qam_constellation(4, tx), tx, float(dbm_to_mw(-3.0)), rho, EhReference())


def test_decoder_training_smoke():
    link = _awgn_link()
    cfg = DecoderTrainConfig(iterations=6, steps=80, batch_size=64)
    hyper, hist = train_hyper_decoder(link, cfg)
    losses = [h["loss"] for h in hist]
    assert len(hist) == 80 and np.isfinite(losses).all()
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    dnn, _ = train_dnn_decoder(link, DecoderTrainConfig(iterations=6, steps=5, batch_size=16,
                                                        iteration_loss="final"))
    batch = link.frames(np.random.default_rng(0), 10)
    for dec in (hyper, dnn):
        assert dec.decode(batch.llrs).shape == (10, 32)
    hyper.iterations = 3
    assert hyper.decode(batch.llrs).shape == (10, 32)


def test_decoder_training_is_deterministic():
    link = _awgn_link()
    cfg = DecoderTrainConfig(steps=4, batch_size=16)
    a, _ = train_hyper_decoder(link, cfg)
    b, _ = train_hyper_decoder(link, cfg)
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)
    assert np.array_equal(a.net.beta, b.net.beta)


# -- end-to-end ---------------------------------------------------------------------

def small_cfg(**kw):
    weights = kw.pop("weights", LossWeights(p_targ=0.03, batch_size=16))
    base = dict(n_bits=16, k_info=8, epochs=3, mapper_hidden=(16,), demapper_hidden=(16,),
                hyper_width=4)
    base.update(kw)
    return E2eConfig(weights, **base)


def test_e2e_config_round_trip():
    cfg = small_cfg(seed=4)
    assert E2eConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        E2eConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ConfigError):
        small_cfg(trainable=("mapper", "eh"))
    with pytest.raises(ConfigError):
        small_cfg(n_bits=12)


def test_e2e_is_deterministic(surrogate):
    a, ha = train_end_to_end(small_cfg(), surrogate)
    b, hb = train_end_to_end(small_cfg(), surrogate)
    assert ha == hb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_e2e_leaves_harvester_untouched(surrogate):
    before = {k: v.copy() for k, v in surrogate.params.items()}
    state, hist = train_end_to_end(small_cfg(), surrogate)
    assert all(np.array_equal(before[k], surrogate.params[k]) for k in before)
    assert not any(k.startswith("eh/") for k in state.trainable_names())
    assert [set(r) for r in hist] == [{"epoch", "loss", "ber", "p_out_mw", "rate"}] * 3


def test_e2e_frozen_groups_do_not_move(surrogate):
    state, _ = train_end_to_end(small_cfg(trainable=("decoder", "rho")), surrogate)
    init = TrainState.initial(small_cfg())
    for k in state.params:
        if not (k.startswith("hyper/") or k == "rho_logit"):
            assert np.array_equal(state.params[k], init.params[k]), k
    assert state.params["rho_logit"] != init.params["rho_logit"]


def test_e2e_resume_matches_continuous_run(tmp_path, surrogate):
    full, _ = train_end_to_end(small_cfg(epochs=4), surrogate)
    part, _ = train_end_to_end(small_cfg(epochs=2), surrogate)
    part.save(tmp_path / "state.json")
    loaded = TrainState.load(tmp_path / "state.json")
    loaded.config = small_cfg(epochs=4)
    resumed, hist = train_end_to_end(loaded.config, surrogate, state=loaded)
    assert [r["epoch"] for r in hist] == [0, 1, 2, 3]
    assert all(np.array_equal(full.params[k], resumed.params[k]) for k in full.params)


def test_e2e_exact_demapper_and_qam_variants(surrogate):
    for kw in ({"mapper": "qam", "demapper": "exact"}, {"channel": "rayleigh", "noise_dbm": -13.0},
               {"noise_placement": "channel", "demapper": "exact", "conv_noise_mw": 0.01}):
        state, hist = train_end_to_end(small_cfg(epochs=2, **kw), surrogate)
        assert np.isfinite([r["loss"] for r in hist]).all()
        link = state.link(surrogate)
        batch = link.frames(np.random.default_rng(0), 8)
        assert state.decoder().decode(batch.llrs).shape == (8, 8)


class _BrokenHarvester:
    params = {}

    def forward(self, p_in):
        return ad.as_tensor(p_in) * np.nan


def test_e2e_nan_aborts_with_state(tmp_path):
    with pytest.raises(NumericGuardError) as info:
        train_end_to_end(small_cfg(), _BrokenHarvester(), abort_path=tmp_path / "abort.json")
    assert (tmp_path / "abort.json").exists()
    assert info.value.state.epoch == 0


@pytest.fixture(scope="module")
def training_runs(surrogate):
    """Three short desk-scale runs per setting (N=64, batch 64, 200 epochs)."""
    settings = {
        "ber": (LossWeights(p_targ=0.03, lam=0.0, beta1=0.0, beta2=0.0, beta3=0.0, beta4=0.0,
                            batch_size=64), {"noise_dbm": -6.0}),
        "energy": (LossWeights(p_targ=0.03, lam=0.0, beta1=0.0, beta2=0.0, beta3=1e5,
                               batch_size=64), {}),
        "rate": (LossWeights(p_targ=0.03, r_targ=0.5, beta4=10.0, batch_size=64), {}),
    }
    out = {}
    for name, (w, extra) in settings.items():
        out[name] = [train_end_to_end(E2eConfig(w, epochs=200, seed=s, **extra), surrogate)
                     for s in range(3)]
    return out


def test_training_ber_decreases(training_runs):
    wins = sum(h[-1]["ber"] < h[0]["ber"] for _, h in training_runs["ber"])
    assert wins >= 2


def test_training_reaches_energy_target(training_runs):
    close = [abs(np.mean([r["p_out_mw"] for r in h[-20:]]) - 0.03) < 0.003
             for _, h in training_runs["energy"]]
    assert sum(close) >= 2


def test_training_holds_rate_target(training_runs):
    assert all(abs(state.rate - 0.5) < 0.02 for state, _ in training_runs["rate"])

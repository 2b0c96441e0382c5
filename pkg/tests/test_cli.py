import pytest

from polariden import harness as H
from polariden.cli import main

SMALL = """\
code: {n: 16, k: 8}
decoder: {iterations: 5}
sim: {frames: 200, chunk: 100}
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def rows_of(path):
    return H.read_csv(path)


def test_construct(tmp_path):
    out = tmp_path / "mask.csv"
    assert main(["construct", "--kind", "pw", "--n", "32", "--k", "16", "--out", str(out)]) == 0
    rows = rows_of(out)
    assert len(rows) == 32 and sum(int(r["info"]) for r in rows) == 16


def test_construct_stdout(capsys):
    assert main(["construct", "--kind", "5g", "--n", "8", "--k", "4", "--out", "-"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# polariden-csv v1 kind=construction")


def test_simulate_reproducible(small_config, tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert main(["simulate", "--config", str(small_config), "--seed", "4", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert int(rows_of(paths[0])[0]["frames"]) == 200


def test_sweep(small_config, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", str(small_config), "--targets", "0,0.02,5", "--out", str(out)]) == 0
    rows = rows_of(out)
    assert [int(r["feasible"]) for r in rows] == [1, 1, 0]
    assert float(rows[0]["rho"]) == 1.0


def test_count_ops(tmp_path):
    out = tmp_path / "ops.csv"
    assert main(["count-ops", "--t", "6", "--out", str(out)]) == 0
    rows = {r["decoder"]: r for r in rows_of(out)}
    assert int(rows["hyper"]["multiplications"]) == int(rows["hyper"]["runtime_multiplications"])
    assert int(rows["dnn"]["memory"]) == 4608


def test_shift_bound_cli(tmp_path):
    out = tmp_path / "bound.csv"
    assert main(["shift-bound", "--rho", "0.5", "--out", str(out)]) == 0
    rows = rows_of(out)
    assert float(rows[0]["snr_db"]) - float(rows[0]["shifted_snr_db"]) == pytest.approx(3.0103, abs=1e-4)
    assert main(["shift-bound", "--rho", "2", "--out", str(out)]) == 2


def test_export_constellation(tmp_path):
    out = tmp_path / "const.csv"
    cfg = tmp_path / "c.yaml"
    cfg.write_text("modulation: {order: 16}\n")
    assert main(["export-constellation", "--config", str(cfg), "--out", str(out)]) == 0
    rows = rows_of(out)
    assert len(rows) == 16 and all(len(r["bits"]) == 4 for r in rows)


def test_fit_eh(tmp_path):
    out = tmp_path / "eh.json"
    assert main(["fit-eh", "--samples", "400", "--p-max", "3", "--out", str(out)]) == 0
    assert out.exists() and out.with_suffix(".csv").exists()
    cfg = tmp_path / "sur.yaml"
    cfg.write_text(SMALL + f"energy: {{model: surrogate, surrogate_checkpoint: '{out}'}}\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s.csv")]) == 0


def test_train_then_adapt(tmp_path):
    cfg = tmp_path / "train.yaml"
    cfg.write_text(SMALL + "train: {mode: decoder, iterations: 5, steps: 5, batch_size: 8}\n")
    ckpt = tmp_path / "ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(ckpt)]) == 0
    for name in ("hyper.json", "dnn.json", "hyper_history.csv", "dnn_history.csv"):
        assert (ckpt / name).exists()
    out = tmp_path / "adapt.csv"
    assert main(["adapt", "--config", str(cfg), "--hyper", str(ckpt / "hyper.json"),
                 "--dnn", str(ckpt / "dnn.json"), "--t-test", "3,5", "--out", str(out)]) == 0
    rows = rows_of(out)
    assert {(r["decoder"], int(r["t_test"])) for r in rows} >= {("hyper", 5), ("dnn", 3)}
    for r in rows:
        assert float(r["bler"]) >= float(r["ber"])


def test_bad_inputs_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("code: {n: 12}\n")
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "none.yaml")]) == 2
    assert main(["adapt", "--hyper", "x.json", "--dnn", "y.json"]) == 2
    assert "polariden" in capsys.readouterr().err

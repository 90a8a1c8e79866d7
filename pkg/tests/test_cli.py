import csv
import io

import pytest

from tetsnn import cli
from tetsnn import config as cfgmod
from tetsnn.config import RunConfig, dumps, loads, parse_config
from tetsnn.errors import ConfigError
from tetsnn.objective import SDT, TOTAL

SMALL = ["--epochs=2", "--T=2", "--synthetic_per_class=12", "--batch_size=16"]


# -- config --------------------------------------------------------------------


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("# nothing set\n\n")
    cfg = parse_config(tmp_path / "c.txt", environ={})
    assert cfg == RunConfig()
    assert (cfg.tau, cfg.v_th, cfg.loss_spec().phi, cfg.loss_spec().lam) == (0.5, 1.0, 1.0, 0.05)


def test_tet_line_maps_to_total(tmp_path):
    (tmp_path / "c.txt").write_text("loss=TET\nlambda=0.05\nT=4  # steps\n")
    spec = parse_config(tmp_path / "c.txt", environ={}).loss_spec()
    assert spec.kind == TOTAL and spec.lam == 0.05
    assert parse_config(None, {"loss": "SDT"}, environ={}).loss_spec().kind == SDT


def test_event_data_lambda_default():
    cfg = parse_config(None, {"dataset": "events", "data_dir": "x"}, environ={})
    assert cfg.loss_spec().lam == 0.001
    assert parse_config(None, {"v_th": "0.5"}, environ={}).loss_spec().phi == 0.5


@pytest.mark.parametrize("pairs, needle", [({"T": "0"}, "T must be ≥ 1"), ({"colour": "red"}, "'colour'"),
                                           ({"epochs": "ten"}, "epochs"), ({"dataset": "cifar10"}, "data_dir"),
                                           ({"lam": "0.1"}, "'lam'"), ({"detach_reset": "maybe"}, "detach_reset"),
                                           ({"tau": "2"}, "tau")])
def test_config_errors(pairs, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(None, pairs, environ={})


def test_flags_override_file_and_env(tmp_path):
    (tmp_path / "c.txt").write_text("T=3\noutput_dir=from_file\n")
    env = {cfgmod.OUTPUT_ENV: "from_env"}
    assert parse_config(tmp_path / "c.txt", environ=env).output_dir == "from_env"
    cfg = parse_config(tmp_path / "c.txt", {"T": "5", "output_dir": "from_flag"}, environ=env)
    assert cfg.T == 5 and cfg.output_dir == "from_flag"


def test_resolved_round_trip():
    cfg = parse_config(None, {"class_subset": "0,1", "loss_switch_epoch": "3", "epochs": "6", "augment":
                              "horizontal_flip:0.5,crop_pad:4", "detach_reset": "yes"}, environ={}).resolved()
    assert cfg.lam == 0.05 and cfg.phi == 1.0
    assert loads(dumps(cfg)) == cfg
    assert cfg.train_config().augment == (("horizontal_flip", 0.5), ("crop_pad", 4.0))


def test_bad_line_rejected(tmp_path):
    (tmp_path / "c.txt").write_text("T 4\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config(tmp_path / "c.txt", environ={})


# -- commands ------------------------------------------------------------------


def test_train_then_evaluate_agree(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", *SMALL, f"--output_dir={out}"]) == 0
    assert (out / "model.ckpt").exists() and (out / "config.txt").exists()
    rows = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    final = [r for r in rows if r["split"] == "test"][-1]
    assert cli.main(["evaluate", *SMALL, f"--output_dir={out}"]) == 0
    ev = list(csv.DictReader(io.StringIO((out / "eval.csv").read_text())))[0]
    assert ev["acc_mean_output"] == final["acc_mean_output"]
    assert ev["loss_tet"] == final["loss_tet"]
    assert loads((out / "config.txt").read_text()).output_dir == str(out)


def test_train_is_byte_deterministic(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert cli.main(["train", *SMALL, f"--output_dir={o}"]) == 0
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()


def test_config_file_and_env_output(tmp_path, monkeypatch):
    (tmp_path / "c.txt").write_text("epochs=1\nT=2\nsynthetic_per_class=8\n")
    monkeypatch.setenv(cfgmod.OUTPUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["train", "--config", str(tmp_path / "c.txt")]) == 0
    assert (tmp_path / "env_out" / "metrics.csv").exists()


def test_tit_landscape_energy(tmp_path, capsys):
    out = tmp_path / "tit"
    args = [*SMALL, f"--output_dir={out}"]
    assert cli.main(["tit", *args, "--tit_T=4", "--tit_epochs=1", "--tit_scratch=true"]) == 0
    ledger = list(csv.DictReader(io.StringIO((out / "tit_ledger.csv").read_text())))
    assert {r["phase"] for r in ledger} == {"initial", "finetune", "scratch"}
    assert "ratio" in capsys.readouterr().out
    assert cli.main(["landscape", *args, "--resolution=3", "--span=0.2", "--landscape_samples=8"]) == 0
    assert len((out / "landscape.csv").read_text().splitlines()) == 10
    assert cli.main(["energy", *args, "--energy_samples=4"]) == 0
    assert (out / "energy.csv").read_text().startswith("layer,name,op,events,count,energy_pj")


def test_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["train", "--T=0", f"--output_dir={tmp_path}"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--nope=1"]) == cli.EXIT_CONFIG
    assert cli.main(["evaluate", f"--output_dir={tmp_path / 'missing'}"]) == cli.EXIT_DATA
    assert cli.main(["train", "--dataset=cifar10", f"--data_dir={tmp_path}",
                     f"--output_dir={tmp_path / 'o'}"]) == cli.EXIT_DATA
    monkeypatch.setattr(cli.checks, "run_all", lambda quick=False: [cli.checks.CheckResult("x", False, 1, 0, 0)])
    assert cli.main(["check"]) == cli.EXIT_CHECK


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    code = cli.main(["train", *SMALL, "--lr=1e300", "--optimizer=sgd", f"--output_dir={tmp_path}"])
    assert code == cli.EXIT_DIVERGED


def test_check_passes_on_fresh_build(capsys):
    assert cli.main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "FAIL" not in out


def test_flag_without_equals(tmp_path):
    assert cli.main(["train", "--epochs", "1", "--T", "2", "--synthetic_per_class", "8",
                     "--output_dir", str(tmp_path)]) == 0
    with pytest.raises(SystemExit):
        cli.main(["fly"])

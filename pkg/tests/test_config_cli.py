import csv
import hashlib
import json

import numpy as np
import pytest

from fedanon.anonymizer import Anonymizer, load_bundle, read_bundle_descriptor
from fedanon.cli import main
from fedanon.config import ExperimentConfig, parse_attributes
from fedanon.errors import ConfigError
from fedanon.experiment import planted_schema
from fedanon.rng import stream

SMALL = """\
[experiment]
seed = 3
data_dir = {data}
out = {out}

[synth]
n_clients = 6
segments_per_client = 160

[federated]
epochs = 1

[evaluation]
cnn_epochs = 3
mi_components = 5
"""


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_config(tmp, name="exp.ini", **fmt):
    path = tmp / name
    path.write_text(SMALL.format(data=fmt.get("data", tmp / "data"), out=fmt.get("out", tmp / "run")))
    return path


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """A synthesized population with one trained model; tests only read from it."""
    tmp = tmp_path_factory.mktemp("exp")
    cfg = write_config(tmp)
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg


# -- config -----------------------------------------------------------------------

class TestConfig:
    def test_types_parsed(self):
        cfg = ExperimentConfig.from_ini("[experiment]\nseed = 4\n[federated]\nshadow = no\nmeta_lr = 0.5\n")
        assert cfg.seed == 4 and cfg.federated.shadow is False and cfg.federated.meta_lr == 0.5
        assert cfg.fed_config().batch == 16 and cfg.loss_weights().alpha == 0.9

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig().validate()

    @pytest.mark.parametrize("text,needle", [
        ("[bogus]\nx = 1\n", "unknown section"),
        ("[federated]\nepochz = 1\n", "epochz"),
        ("[federated]\nepochs = many\n", "epochs"),
        ("[experiment]\nseed\n", "exp.ini"),
    ])
    def test_diagnostics(self, text, needle):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_ini(text, "exp.ini")
        assert needle in str(exc.value)

    def test_ini_round_trip(self):
        cfg = ExperimentConfig.from_ini("[experiment]\nseed = 1\n[heterogeneity]\nimbalance_ratio = 9\n")
        assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg

    def test_override_copies(self):
        base = ExperimentConfig.from_ini("[experiment]\nseed = 1\n")
        new = base.override(federated__epochs=9, experiment__seed=None)
        assert new.federated.epochs == 9 and base.federated.epochs == 5 and new.seed == 1
        with pytest.raises(ConfigError):
            base.override(federated__nope=1)

    def test_attributes(self):
        assert [(a.name, a.n_classes) for a in parse_attributes("gender, weight:3")] == [("gender", 2), ("weight", 3)]
        with pytest.raises(ConfigError):
            parse_attributes("gender:1")


# -- synth ---------------------------------------------------------------------------

class TestSynth:
    def test_twelve_clients_byte_identical(self, tmp_path):
        for run in ("a", "b"):
            assert main(["synth", "--seed", "1", "--clients", "12", "--segments", "40",
                         "--data-dir", str(tmp_path / run)]) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == [f"client{i:03d}.csv" for i in range(12)] + ["schema.json"]
        assert all(digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f) for f in files)

    def test_seed_missing_is_config_error(self, tmp_path, capsys):
        assert main(["synth", "--data-dir", str(tmp_path)]) == 2
        assert "seed" in capsys.readouterr().err

    def test_invalid_schema_diagnostics(self, tmp_path, capsys):
        data = tmp_path / "data"
        data.mkdir()
        (data / "schema.json").write_text('{"channels": 2, "window": 0, "stride": 1, "public_classes": 4, '
                                          '"private_attributes": [{"name": "g", "n_classes": 2}]}')
        cfg = write_config(tmp_path, data=data)
        assert main(["prepare", "--config", str(cfg)]) == 3
        err = capsys.readouterr().err
        assert "schema.json" in err and "'window'" in err

    def test_malformed_schema_line(self, tmp_path, capsys):
        data = tmp_path / "data"
        data.mkdir()
        (data / "schema.json").write_text('{\n  "channels": 2,\n  oops\n}')
        assert main(["prepare", "--config", str(write_config(tmp_path, data=data))]) == 3
        assert "line 3" in capsys.readouterr().err


# -- train ------------------------------------------------------------------------------

class TestTrain:
    def test_outputs(self, experiment):
        tmp, _ = experiment
        run = tmp / "run"
        for name in ("model.bundle", "round_log.csv", "config.ini"):
            assert (run / name).exists()
        assert sorted(p.name for p in (run / "snapshots").iterdir()) == ["epoch_000.bundle", "epoch_001.bundle"]
        header = (run / "round_log.csv").read_text().splitlines()[0]
        assert header == "epoch,round,client,vae_loss,disc_loss,meta_loss,grad_norm"
        extra = read_bundle_descriptor((run / "model.bundle").read_bytes())["extra"]
        assert set(extra) >= {"schema", "stats", "config", "participants"}

    def test_deterministic(self, experiment, tmp_path):
        tmp, cfg = experiment
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        # the bundle echoes the output path, so compare parameters and the log
        again = load_bundle((tmp_path / "model.bundle").read_bytes())
        assert again.params.checksum() == load_bundle((tmp / "run" / "model.bundle").read_bytes()).params.checksum()
        assert digest(tmp_path / "round_log.csv") == digest(tmp / "run" / "round_log.csv")

    def test_zero_epochs_is_initialization(self, experiment, tmp_path):
        tmp, cfg = experiment
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--epochs", "0"]) == 0
        model = load_bundle((tmp_path / "model.bundle").read_bytes())
        fresh = Anonymizer(model.config, seed=int(stream(3, "init").integers(2 ** 31)))
        assert model.params.equal(fresh.params)

    def test_fedavg_switch(self, experiment, tmp_path):
        tmp, cfg = experiment
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--aggregation", "fedavg"]) == 0
        assert "aggregation = fedavg" in (tmp_path / "config.ini").read_text()
        fedavg = load_bundle((tmp_path / "model.bundle").read_bytes())
        assert not fedavg.params.equal(load_bundle((tmp / "run" / "model.bundle").read_bytes()).params)

    def test_multi_attr(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["synth", "--config", str(cfg), "--multi-attr", "gender,weight"]) == 0
        schema = json.loads((tmp_path / "data" / "schema.json").read_text())
        assert [a["name"] for a in schema["private_attributes"]] == ["gender", "weight"]
        assert main(["train", "--config", str(cfg), "--multi-attr", "gender,weight", "--epochs", "0"]) == 0
        assert len(load_bundle((tmp_path / "run" / "model.bundle").read_bytes()).discriminators) == 2

    def test_bad_batch(self, experiment, capsys):
        _, cfg = experiment
        assert main(["train", "--config", str(cfg), "--batch", "1"]) == 2


# -- eval / anonymize / adapt / curve ----------------------------------------------------

class TestEval:
    def test_twice_identical(self, experiment, tmp_path):
        tmp, cfg = experiment
        out = tmp_path / "e"
        bundle = str(tmp / "run" / "model.bundle")
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--bundle", bundle]) == 0
        first = (out / "report.json").read_bytes()
        assert main(["eval", "--config", str(cfg), "--out", str(out), "--bundle", bundle]) == 0
        assert (out / "report.json").read_bytes() == first
        report = json.loads(first)
        assert report["anonymized"]["desired"]["baseline"] == 0.25
        assert report["anonymized"]["intrusive"]["gender"]["baseline"] == 0.5
        assert report["config"]["experiment"]["seed"] == 3
        assert report["config"]["federated"]["epochs"] == 1
        rows = list(csv.DictReader((out / "per_client.csv").open()))
        assert len(rows) == 6 and all(r["participant"] == "1" for r in rows)

    def test_missing_bundle(self, experiment, tmp_path, capsys):
        _, cfg = experiment
        assert main(["eval", "--config", str(cfg), "--out", str(tmp_path)]) == 3
        assert "bundle" in capsys.readouterr().err

    def test_anonymize_client(self, experiment):
        tmp, cfg = experiment
        assert main(["anonymize", "--config", str(cfg), "--client", "client002"]) == 0
        rows = list(csv.reader((tmp / "run" / "anonymized_client002.csv").open()))
        assert rows[0][:3] == ["segment", "public", "gender_drawn"]
        assert len(rows[0]) == 3 + 64 and len(rows) - 1 == 160
        assert {r[2] for r in rows[1:]} <= {"0", "1"}

    def test_unknown_client(self, experiment, capsys):
        _, cfg = experiment
        assert main(["anonymize", "--config", str(cfg), "--client", "nobody"]) == 3
        assert main(["adapt", "--config", str(cfg), "--client", "nobody"]) == 3
        assert "nobody" in capsys.readouterr().err

    def test_curve(self, experiment):
        tmp, cfg = experiment
        assert main(["curve", "--config", str(cfg)]) == 0
        lines = (tmp / "run" / "curve_gender.csv").read_text().splitlines()
        assert [line.split(",")[0] for line in lines] == ["epoch", "0", "1"]


class TestAdapt:
    def test_default_iterations_and_new_bundle(self, experiment, capsys):
        tmp, cfg = experiment
        source = tmp / "run" / "model.bundle"
        before = digest(source)
        assert main(["adapt", "--config", str(cfg), "--client", "client001", "--rehearsal", "1"]) == 0
        out = capsys.readouterr().out
        assert "80 iterations" in out and "before" in out and "after" in out
        adapted = tmp / "run" / "adapted_client001.bundle"
        assert digest(source) == before
        a = load_bundle(adapted.read_bytes())
        assert not a.params.equal(load_bundle(source.read_bytes()).params)
        assert read_bundle_descriptor(adapted.read_bytes())["extra"]["adapted_client"] == "client001"

    @pytest.mark.parametrize("fraction", ["0", "0.05", "-0.1"])
    def test_fraction_rejected(self, experiment, fraction):
        _, cfg = experiment
        with pytest.raises(SystemExit) as exc:
            main(["adapt", "--config", str(cfg), "--client", "client001", "--fraction", fraction])
        assert exc.value.code == 2

    def test_module_entry_point(self):
        import subprocess
        import sys
        r = subprocess.run([sys.executable, "-m", "fedanon", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "synth" in r.stdout


def test_schema_helper_matches_synth_default():
    cfg = ExperimentConfig.from_ini("[experiment]\nseed = 0\n")
    assert cfg.synth_schema() == planted_schema()
    assert np.isclose(cfg.fed_config().selection_fraction, 0.4)

import pytest

from dgrec import cli
from dgrec.config import PRESETS, ConfigError, read_config_file, resolve

TINY = ["--synthetic", "--users", "60", "--items", "40", "--category-count", "5", "--per-user", "8"]
FAST = ["--set", "max_epochs=2", "--set", "d=8", "--set", "val_k=10", "--set", "batch_size=64", "--set", "k=3"]


@pytest.fixture(scope="module")
def split_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "split"
    assert cli.main(["prepare", *TINY, "--seed", "4", "--out", str(out)]) == 0
    return out


def train(split_dir, out, *extra):
    return cli.main(["train", "--split", str(split_dir), "--out", str(out), "--threads", "1", *FAST, *extra])


class TestPrepare:
    def test_outputs_and_stats(self, split_dir, capsys, tmp_path):
        names = {p.name for p in split_dir.iterdir()}
        assert {"train.tsv", "validation.tsv", "test.tsv", "categories.tsv", "manifest.txt",
                "interactions.tsv", "item_categories.tsv"} <= names
        assert cli.main(["prepare", *TINY, "--seed", "4", "--out", str(tmp_path / "again")]) == 0
        assert "Average Category Size" in capsys.readouterr().out
        assert (tmp_path / "again" / "manifest.txt").read_bytes() == (split_dir / "manifest.txt").read_bytes()

    def test_from_files(self, split_dir, tmp_path):
        out = tmp_path / "files"
        code = cli.main(["prepare", "--interactions", str(split_dir / "interactions.tsv"),
                         "--categories", str(split_dir / "item_categories.tsv"), "--k-core", "2",
                         "--out", str(out)])
        assert code == 0 and (out / "train.tsv").exists()

    def test_collapsing_k_core_fails_and_cleans_up(self, split_dir, tmp_path):
        out = tmp_path / "gone"
        code = cli.main(["prepare", "--interactions", str(split_dir / "interactions.tsv"),
                         "--k-core", "500", "--out", str(out)])
        assert code != 0 and not out.exists()

    def test_missing_input(self, tmp_path):
        assert cli.main(["prepare", "--out", str(tmp_path / "x")]) != 0


class TestTrainEvaluate:
    def test_round_trip(self, split_dir, tmp_path, capsys):
        out = tmp_path / "run"
        assert train(split_dir, out) == 0
        assert {"config.txt", "train_log.csv", "checkpoint.npz"} <= {p.name for p in out.iterdir()}
        header = (out / "train_log.csv").read_text().splitlines()[0]
        assert header == "epoch,loss,val_recall,val_coverage,elapsed_seconds,neighborhood_generation"
        assert cli.main(["evaluate", "--checkpoint", str(out / "checkpoint.npz"), "--cutoffs", "5,10"]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "metric,cutoff,value" and len(lines) == 7
        assert "coverage" in capsys.readouterr().out

    def test_metrics_deterministic(self, split_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            assert train(split_dir, tmp_path / name, "--seed", "7") == 0
            assert cli.main(["evaluate", "--checkpoint", str(tmp_path / name / "checkpoint.npz"),
                             "--split", str(split_dir), "--cutoffs", "5,10"]) == 0
            outs.append((tmp_path / name / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("preset", ["lightgcn", "mf-bpr"])
    def test_baseline_presets(self, split_dir, tmp_path, preset):
        assert train(split_dir, tmp_path / preset, "--preset", preset) == 0
        text = (tmp_path / preset / "config.txt").read_text()
        assert "use_selection = False" in text

    def test_popularity(self, split_dir, tmp_path):
        out = tmp_path / "pop.csv"
        assert cli.main(["evaluate", "--preset", "popularity", "--split", str(split_dir),
                         "--cutoffs", "5", "--out", str(out)]) == 0
        assert out.read_text().startswith("metric,cutoff,value")

    def test_popularity_cannot_train(self, split_dir, tmp_path):
        assert train(split_dir, tmp_path / "p", "--preset", "popularity") != 0

    def test_bad_config_exits_nonzero_and_leaves_nothing(self, split_dir, tmp_path):
        out = tmp_path / "bad"
        assert train(split_dir, out, "--set", "beta=1.5") != 0
        assert train(split_dir, out, "--set", "no_such_key=1") != 0
        assert not out.exists()

    def test_training_failure_removes_partial_output(self, split_dir, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("diverged")
        monkeypatch.setattr(cli, "fit", boom)
        out = tmp_path / "partial"
        assert train(split_dir, out) == 3
        assert not out.exists()

    def test_config_file(self, split_dir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# tiny run\npreset = lightgcn\nsplit = {split_dir}\nmax_epochs = 1\nd = 4\nval_k = 5\n")
        out = tmp_path / "fromfile"
        assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--threads", "1"]) == 0
        assert "max_epochs = 1" in (out / "config.txt").read_text()


class TestSweep:
    def test_beta_four_rows(self, split_dir, tmp_path):
        out = tmp_path / "sweep"
        code = cli.main(["sweep", "--param", "beta", "--values", "0,0.5,0.9,0.95", "--split", str(split_dir),
                         "--out", str(out), "--threads", "1", "--cutoff", "10", *FAST, "--set", "max_epochs=1"])
        assert code == 0
        lines = (out / "sweep_beta.csv").read_text().splitlines()
        assert lines[0] == "series,param,value,seeds,cutoff,recall,hit_ratio,coverage"
        assert len(lines) == 5

    def test_layer_readout_comparison(self, split_dir, tmp_path):
        out = tmp_path / "sweepL"
        code = cli.main(["sweep", "--param", "L", "--values", "1,2", "--compare-readout", "--seeds", "0,1",
                         "--split", str(split_dir), "--out", str(out), "--threads", "1", "--cutoff", "10",
                         *FAST, "--set", "max_epochs=1"])
        assert code == 0
        rows = (out / "sweep_layers.csv").read_text().splitlines()[1:]
        assert [r.split(",")[0] for r in rows] == ["attention", "attention", "mean", "mean"]
        assert all(r.split(",")[3] == "2" for r in rows)

    def test_unknown_param(self, split_dir, tmp_path):
        assert cli.main(["sweep", "--param", "lr", "--values", "1", "--split", str(split_dir),
                         "--out", str(tmp_path / "s")]) != 0


class TestPresets:
    def test_mf_bpr_expansion(self):
        t = resolve("mf-bpr").train
        assert (t.layers, t.use_selection, t.use_attention, t.use_reweight) == (0, False, False, False)

    def test_lightgcn_expansion(self):
        t = resolve("lightgcn").train
        assert not (t.use_selection or t.use_attention or t.use_reweight)
        assert t.layers == resolve("dgrec").train.layers

    def test_dgrec_expansion(self):
        t = resolve("dgrec").train
        assert t.use_selection and t.use_attention and t.use_reweight

    def test_conflicting_forced_key(self):
        with pytest.raises(ConfigError):
            resolve("mf-bpr", flag_values={"layers": 2})

    def test_precedence(self):
        cfg = resolve("dgrec", {"beta": 0.5, "k": 3}, {"beta": 0.7})
        assert cfg.train.beta == 0.7 and cfg.train.k == 3

    def test_unknown_preset_and_key(self):
        with pytest.raises(ConfigError):
            resolve("nope")
        with pytest.raises(ConfigError):
            resolve("dgrec", {"bogus": 1})

    def test_config_file_parsing(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("beta = 0.3  # comment\n\nuse_attention = off\n")
        assert read_config_file(p) == {"beta": 0.3, "use_attention": False}
        p.write_text("beta 0.3\n")
        with pytest.raises(ConfigError, match="c.cfg:1"):
            read_config_file(p)

    def test_all_presets_listed(self):
        assert set(PRESETS) == {"dgrec", "lightgcn", "mf-bpr", "popularity"}

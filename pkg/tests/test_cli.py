import csv
import filecmp
import json
from dataclasses import asdict

import pytest

from thunderface import cli
from thunderface.config import ConfigError, RunConfig, defaults_text, load_config, _parse
from thunderface.corpus import load_corpus
from thunderface.errors import TrainingDiverged
from thunderface.metrics import MetricReport

SMALL = """
[corpus]
n_train = 8
n_val = 3
n_test = 2
min_frames = 16
max_frames = 24
[m2s]
hidden = 16
blocks = 1
heads = 2
epochs = 2
abas_steps = 10
[diffusion]
layers = 1
heads = 2
dim = 16
d_s = 16
steps = 5
max_steps = 4
[eval]
n_samples = 2
"""


def run(*argv):
    return cli.run_command([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    assert run("gen-corpus", "--config", cfg, "--out", root / "gen") == 0
    corpus = root / "gen" / "corpus"
    assert run("train-m2s", "--config", cfg, "--corpus", corpus, "--out", root / "m2s") == 0
    assert run("train-thunder", "--config", cfg, "--corpus", corpus, "--m2s", root / "m2s" / "m2s.npz",
               "--out", root / "thunder") == 0
    return root, cfg, corpus


def test_defaults_file_matches_dataclass_defaults():
    doc = _parse(defaults_text(), "defaults.toml")
    ref = RunConfig()
    for section, values in doc.items():
        if section == "seed":
            assert values == ref.seed
            continue
        expected = asdict(getattr(ref, section))
        for key, value in values.items():
            assert expected[key] == value, f"{section}.{key}"
        assert set(expected) - {"seed"} == set(values), section


def test_config_errors_name_the_key(tmp_path):
    for text, key in (("[m2s]\nbogus = 1\n", "m2s.bogus"), ("[diffusion]\nlr = 'fast'\n", "diffusion.lr"),
                      ("[diffusion]\ndim = 30\n", "diffusion.dim"), ("[wat]\n", "wat"),
                      ("[eval]\nn_samples = 0\n", "eval.n_samples")):
        path = tmp_path / "c.toml"
        path.write_text(text)
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.key == key
    assert load_config(seed=7).seed == 7 and load_config(seed=7).corpus.seed == 7


def test_cli_reports_bad_key(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[m2s]\nbogus = 3\n")
    assert run("gen-corpus", "--config", bad, "--out", tmp_path / "x") == 1
    assert "m2s.bogus" in capsys.readouterr().err
    assert run("no-such-command", "--out", tmp_path) == 1
    assert run("sample", "--out", tmp_path) == 1  # missing --corpus


def test_gen_corpus_defaults(tmp_path):
    assert run("gen-corpus", "--out", tmp_path) == 0
    corpus = load_corpus(tmp_path / "corpus")
    assert [len(corpus.split(s)) for s in ("train", "val", "test")] == [200, 40, 40]
    manifest = json.loads((tmp_path / "run-gen-corpus.json").read_text())
    assert manifest["lineage"]["corpus_id"] == corpus.corpus_id
    assert {"config_hash", "seed", "version"} <= set(manifest)


def test_gen_corpus_is_reproducible(work, tmp_path):
    root, cfg, corpus = work
    assert run("gen-corpus", "--config", cfg, "--out", tmp_path) == 0
    other = tmp_path / "corpus"
    assert filecmp.cmp(corpus / "manifest.json", other / "manifest.json", shallow=False)
    diff = filecmp.dircmp(corpus / "sequences", other / "sequences")
    assert not diff.diff_files and not diff.left_only and not diff.right_only


def test_training_is_reproducible(work, tmp_path):
    root, cfg, corpus = work
    assert run("train-m2s", "--config", cfg, "--corpus", corpus, "--out", tmp_path) == 0
    from thunderface.checkpoint import load_checkpoint
    assert (load_checkpoint(tmp_path / "m2s.npz")[1]["parameter_hash"]
            == load_checkpoint(root / "m2s" / "m2s.npz")[1]["parameter_hash"])


def test_fit_units_and_eval_m2s(work, tmp_path):
    root, cfg, corpus = work
    assert run("fit-units", "--config", cfg, "--corpus", corpus, "--out", tmp_path) == 0
    units = json.loads((tmp_path / "units.json").read_text())
    assert units["n_units"] == 8 and 0.0 <= units["agreement"] <= 1.0
    assert run("eval-m2s", "--config", cfg, "--corpus", corpus, "--m2s", root / "m2s" / "m2s.npz",
               "--out", tmp_path) == 0
    report = json.loads((tmp_path / "m2s_eval.json").read_text())
    assert {"mel_L1", "unit_accuracy"} <= set(report)


def test_m2s_flag_contract(work, tmp_path):
    root, cfg, corpus = work
    missing = tmp_path / "nope.npz"
    assert run("train-thunder", "--config", cfg, "--corpus", corpus, "--no-m2s", "--m2s", missing,
               "--out", tmp_path / "a") == 0
    assert run("train-thunder", "--config", cfg, "--corpus", corpus, "--m2s", missing,
               "--out", tmp_path / "b") == 1
    manifest = json.loads((tmp_path / "a" / "run-train-thunder.json").read_text())
    assert manifest["config"]["diffusion"]["with_m2s"] is False
    assert run("train-thunder", "--config", cfg, "--corpus", corpus, "--no-m2s", "--train-audio",
               "--m2s-weight", "0.5", "--out", tmp_path / "c") == 0
    manifest = json.loads((tmp_path / "c" / "run-train-thunder.json").read_text())
    assert manifest["config"]["diffusion"]["encoder_mode"] == "trainable"
    assert manifest["config"]["diffusion"]["w_m2s"] == 0.5


def test_sample_and_evaluate(work, tmp_path):
    root, cfg, corpus = work
    model = root / "thunder" / "thunder.npz"
    seq = load_corpus(corpus).split("test")[0].index
    assert run("sample", "--config", cfg, "--corpus", corpus, "--model", model, "--audio", seq,
               "--num-samples", 3, "--out", tmp_path / "s") == 0
    import numpy as np
    with np.load(tmp_path / "s" / f"samples_{seq:05d}.npz") as z:
        assert z["expressions"].shape[0] == 3
        assert z["expressions"].shape[1:] == z["ground_truth"].shape
    assert run("sample", "--config", cfg, "--corpus", corpus, "--model", model, "--audio", 99999,
               "--out", tmp_path / "s") == 1

    for name in ("e1", "e2"):
        assert run("evaluate", "--config", cfg, "--corpus", corpus, "--model", model,
                   "--out", tmp_path / name) == 0
    a, b = (tmp_path / n / "report.csv" for n in ("e1", "e2"))
    assert a.read_bytes() == b.read_bytes()
    header = next(csv.reader(a.open()))
    assert header == ["model"] + MetricReport.field_names()


def test_evaluate_rejects_foreign_checkpoint(work, tmp_path, capsys):
    root, cfg, corpus = work
    other_cfg = tmp_path / "other.toml"
    other_cfg.write_text(SMALL + "\n")
    assert run("gen-corpus", "--config", other_cfg, "--seed", 5, "--out", tmp_path) == 0
    assert run("evaluate", "--config", cfg, "--corpus", tmp_path / "corpus",
               "--model", root / "thunder" / "thunder.npz", "--out", tmp_path / "e") == 1
    assert "corpus_id" in capsys.readouterr().err


def test_runtime_failures_exit_2(work, tmp_path, monkeypatch):
    root, cfg, corpus = work

    def diverge(*a, **k):
        raise TrainingDiverged(3, float("nan"))

    monkeypatch.setattr(cli, "train_thunder", diverge)
    assert run("train-thunder", "--config", cfg, "--corpus", corpus, "--no-m2s", "--out", tmp_path) == 2


def test_ablate(work, tmp_path, capsys):
    root, cfg, corpus = work
    m2s = root / "m2s" / "m2s.npz"
    spec = tmp_path / "spec.toml"
    spec.write_text('[[variant]]\nname = "without"\nwith_m2s = false\n\n'
                    '[[variant]]\nname = "with"\nwith_m2s = true\n')
    assert run("ablate", "--config", cfg, "--corpus", corpus, "--m2s", m2s, "--spec", spec,
               "--out", tmp_path / "a") == 0
    rows = list(csv.DictReader((tmp_path / "a" / "ablation.csv").open()))
    assert [r["name"] for r in rows] == ["without", "with"]
    deltas = list(csv.DictReader((tmp_path / "a" / "deltas.csv").open()))
    assert len(deltas) == 1 and deltas[0]["variant"] == "with"
    assert float(deltas[0]["lve"]) == pytest.approx(float(rows[1]["lve"]) - float(rows[0]["lve"]))

    spec.write_text('[[variant]]\nname = "only"\nwith_m2s = false\n')
    assert run("ablate", "--config", cfg, "--corpus", corpus, "--spec", spec, "--out", tmp_path / "b") == 0
    assert len(list(csv.DictReader((tmp_path / "b" / "ablation.csv").open()))) == 1

    spec.write_text('[[variant]]\nname = "x"\n[[variant]]\nname = "x"\n')
    assert run("ablate", "--config", cfg, "--corpus", corpus, "--spec", spec, "--out", tmp_path / "c") == 1
    assert "duplicate" in capsys.readouterr().err

    spec.write_text('[[variant]]\nname = "needs_face"\nwith_m2s = true\ninput_space = "face"\n')
    assert run("ablate", "--config", cfg, "--corpus", corpus, "--m2s", m2s, "--spec", spec,
               "--out", tmp_path / "d") == 1
    assert "needs_face" in capsys.readouterr().err


def test_abas_command(work, tmp_path):
    root, cfg, corpus = work
    seq = load_corpus(corpus).split("test")[0].index
    assert run("abas", "--config", cfg, "--corpus", corpus, "--m2s", root / "m2s" / "m2s.npz",
               "--audio", seq, "--out", tmp_path) == 0
    summary = json.loads((tmp_path / f"abas_{seq:05d}.json").read_text())
    assert summary["best_objective"] <= summary["initial_objective"]

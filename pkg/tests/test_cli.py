import json

import numpy as np
import pytest

from taskembed import io as tio
from taskembed.cli import EXIT_DATA, EXIT_NAN, EXIT_OK, EXIT_USAGE, main
from taskembed.config import ENV_OUTPUT, ENV_SEED, AnalysisConfig, ExperimentConfig, SuiteConfig
from taskembed.encoder import EncoderConfig
from taskembed.multitask import TrainConfig

SMALL = ExperimentConfig(
    encoder=EncoderConfig(num_layers=1, num_heads=2, hidden=8, ffn=16),
    train=TrainConfig(batch_size=16, lr=1e-2, single_epochs=1, multitask_epochs=1, example_cap=64,
                      bottleneck=4, dim_z=4),
    suite=SuiteConfig(n_per_type=2, size_profile=(40, 48, 56, 64)),
    analysis=AnalysisConfig(mlm_steps=3, baseline_trials=20, random_draws=2),
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(ENV_SEED, raising=False)
    monkeypatch.delenv(ENV_OUTPUT, raising=False)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A workspace with a suite, an encoder and the basic runs already built."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.ini"
    SMALL.save(cfg)
    c = ["--config", str(cfg)]
    steps = [
        ["generate", *c, "--out", str(root / "suite")],
        ["pretrain", *c, "--suite", str(root / "suite"), "--out", str(root / "enc.bin")],
        ["train", "--mode", "single", *c, "--suite", str(root / "suite"), "--encoder",
         str(root / "enc.bin"), "--out", str(root / "plain")],
        ["train", "--mode", "multitask", *c, "--suite", str(root / "suite"), "--encoder",
         str(root / "enc.bin"), "--out", str(root / "ca")],
        ["train", "--mode", "multitask_k3", *c, "--suite", str(root / "suite"), "--encoder",
         str(root / "enc.bin"), "--out", str(root / "k3")],
        ["train", "--mode", "multitask_shared_holdout", *c, "--suite", str(root / "suite"),
         "--encoder", str(root / "enc.bin"), "--out", str(root / "zs")],
        ["embed", *c, "--suite", str(root / "suite"), "--encoder", str(root / "enc.bin"),
         "--kinds", "textemb,fisher,aspects", "--single", str(root / "plain"),
         "--run", str(root / "ca"), "--out", str(root / "spaces")],
    ]
    for argv in steps:
        assert main(argv) == EXIT_OK, argv
    return root


def args(ws, *rest):
    return [*rest, "--config", str(ws / "exp.ini")]


class TestWorkflow:
    def test_artifacts(self, ws):
        for f in ("suite/manifest.json", "suite/config.ini", "enc.bin", "ca/checkpoint.bin",
                  "ca/manifest.json", "ca/train_log.csv", "spaces/aspects.tsv", "spaces/fisher.tsv",
                  "spaces/textemb.tsv", "spaces/latent_ca.tsv"):
            assert (ws / f).exists(), f
        manifest = json.loads((ws / "ca/manifest.json").read_text())
        assert manifest["dim_z"] == 4 and "suite_hash" in manifest

    def test_generate_is_deterministic(self, ws, tmp_path):
        assert main(args(ws, "generate", "--out", str(tmp_path / "again"))) == EXIT_OK
        for f in sorted((ws / "suite").iterdir()):
            assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes(), f.name

    def test_generate_refuses_overwrite(self, ws):
        assert main(args(ws, "generate", "--out", str(ws / "suite"))) == EXIT_DATA

    def test_env_output_dir(self, ws, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_OUTPUT, str(tmp_path / "envout"))
        assert main(["generate"]) == EXIT_OK
        assert (tmp_path / "envout" / "suite" / "manifest.json").exists()

    @pytest.mark.parametrize("analysis", ["stability_within", "pca"])
    def test_analyses_on_k3(self, ws, tmp_path, analysis):
        assert main(args(ws, "analyze", "--analysis", analysis, "--run", str(ws / "k3"),
                         "--svg", "--out", str(tmp_path))) == EXIT_OK
        assert (tmp_path / f"{analysis}.json").exists()

    def test_pca_outputs(self, ws, tmp_path):
        main(args(ws, "analyze", "--analysis", "pca", "--run", str(ws / "ca"), "--svg",
                  "--out", str(tmp_path)))
        lines = (tmp_path / "pca.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["task_id", "type", "x", "y"] and len(lines) == 17
        assert (tmp_path / "pca.svg").read_text().startswith("<svg")

    def test_probe_and_regress(self, ws, tmp_path):
        for a in ("probe", "regress"):
            assert main(args(ws, "analyze", "--analysis", a, "--run", str(ws / "spaces/latent_ca.tsv"),
                             "--aspects", str(ws / "spaces/aspects.tsv"), "--out", str(tmp_path))) == 0
        rows = json.loads((tmp_path / "probe.json").read_text())["rows"]
        assert {"task_type", "domain_cluster", "task_type_shuffled"} <= {r["row"] for r in rows}

    def test_stability_across(self, ws, tmp_path):
        assert main(args(ws, "analyze", "--analysis", "stability_across", "--run", str(ws / "ca"),
                         "--run", str(ws / "k3"), "--out", str(tmp_path))) == EXIT_OK

    def test_table1(self, ws, tmp_path):
        assert main(args(ws, "analyze", "--analysis", "table1", "--run", str(ws / "plain"),
                         "--run", str(ws / "ca"), "--suite", str(ws / "suite"),
                         "--encoder", str(ws / "enc.bin"), "--out", str(tmp_path))) == EXIT_OK
        rows = json.loads((tmp_path / "table1.json").read_text())["rows"]
        assert [r["strategy"] for r in rows] == ["majority_class", "plain_adapter", "ca"]

    def test_zeroshot(self, ws, tmp_path):
        assert main(args(ws, "zeroshot", "--run", str(ws / "zs"), "--suite", str(ws / "suite"),
                         "--aspects", str(ws / "spaces/aspects.tsv"),
                         "--sources", "ridge,same_type_mean,random,oracle",
                         "--out", str(tmp_path))) == EXIT_OK
        rep = json.loads((tmp_path / "zeroshot.json").read_text())
        assert len(rep["heldout"]) == 8
        oracle = next(r for r in rep["sources"] if r["source"] == "oracle")
        assert oracle["all_equal"]

    def test_report_not_overwritten(self, ws, tmp_path):
        a = args(ws, "analyze", "--analysis", "pca", "--run", str(ws / "ca"), "--out", str(tmp_path))
        assert main(a) == EXIT_OK
        assert main(a) == EXIT_DATA


class TestExitCodes:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_bad_flag(self):
        assert main(["train", "--mode", "nonsense"]) == EXIT_USAGE

    def test_missing_prerequisite_named(self, ws, capsys):
        assert main(args(ws, "pretrain", "--out", str(ws / "x.bin"))) == EXIT_USAGE
        assert "--suite" in capsys.readouterr().err

    def test_missing_file_is_data_error(self, ws, tmp_path):
        assert main(args(ws, "train", "--mode", "multitask", "--suite", str(ws / "suite"),
                         "--encoder", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "r"))) == EXIT_DATA

    def test_stability_across_single_run(self, ws, capsys):
        assert main(args(ws, "analyze", "--analysis", "stability_across", "--run", str(ws / "ca"))) == 1
        assert "second run" in capsys.readouterr().err

    def test_mismatched_dim(self, ws, tmp_path):
        cfg = tmp_path / "wide.ini"
        wide = ExperimentConfig.from_ini(SMALL.to_ini())
        wide.train = wide.train.replace(dim_z=6)
        wide.save(cfg)
        assert main(["train", "--mode", "multitask", "--config", str(cfg), "--suite", str(ws / "suite"),
                     "--encoder", str(ws / "enc.bin"), "--out", str(tmp_path / "wide")]) == EXIT_OK
        assert main(args(ws, "analyze", "--analysis", "stability_across", "--run", str(ws / "ca"),
                         "--run", str(tmp_path / "wide"), "--out", str(tmp_path / "rep"))) == EXIT_DATA

    def test_wrong_aspect_width(self, ws, tmp_path):
        assert main(args(ws, "analyze", "--analysis", "probe", "--run", str(ws / "ca"),
                         "--aspects", str(ws / "spaces/textemb.tsv"), "--out", str(tmp_path))) == EXIT_DATA

    def test_zeroshot_needs_shared_heads(self, ws, tmp_path):
        assert main(args(ws, "zeroshot", "--run", str(ws / "ca"), "--suite", str(ws / "suite"),
                         "--out", str(tmp_path))) == EXIT_DATA

    def test_non_finite_exit(self, ws, tmp_path):
        enc = tio.load_encoder(ws / "enc.bin")
        next(iter(enc.params.values())).data[...] = np.nan
        tio.save_encoder(tmp_path / "nan.bin", enc)
        assert main(args(ws, "train", "--mode", "multitask", "--suite", str(ws / "suite"),
                         "--encoder", str(tmp_path / "nan.bin"), "--out", str(tmp_path / "r"))) == EXIT_NAN

"""End-to-end tests for the convnova command line."""

import pytest

from main import main
from src.checkpoint import RunManifest, content_hash, load_checkpoint
from src.metrics import MetricReport
from src.receptive_field import receptive_field_analytic

TINY_MODEL = """\
# tiny model for tests
model.hidden_dim = 8
model.n_gcb = 2
model.kernel_size = 3
model.dilation_base = 2
train.batch_size = 8
train.progress = false
"""


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(argv):
    """Run main() and return its exit code (0 when it returns normally)."""
    try:
        main(argv)
    except SystemExit as exc:
        return exc.code
    return 0


def make_motif_data(tmp_path, n=40, length=24):
    config = write_config(tmp_path, f"synth.n = {n}\nsynth.length = {length}\nsynth.motif = TATA\n", "synth.cfg")
    out = str(tmp_path / "motif.tsv")
    assert run_cli(["synth", "--generator", "motif", "--config", config, "--out", out, "--seed", "1"]) == 0
    return out


def test_synth_writes_data_and_manifests(tmp_path, capsys):
    out = make_motif_data(tmp_path)
    assert "Generated motif: 40 examples, class counts [20, 20]" in capsys.readouterr().out
    first_hash = content_hash(out)
    manifest = RunManifest.load(out + ".manifest.json")
    assert manifest.command == "synth" and manifest.seed == 1
    assert manifest.outputs[out] == first_hash

    assert run_cli(["rerun", out + ".manifest.json"]) == 0
    assert content_hash(out) == first_hash


def test_synth_requires_generator(tmp_path, capsys):
    assert run_cli(["synth", "--out", str(tmp_path / "x.tsv")]) == 1
    assert capsys.readouterr().err.startswith("Error: config:")


def test_finetune_then_eval(tmp_path, capsys):
    data = make_motif_data(tmp_path)
    config = write_config(tmp_path, TINY_MODEL + "train.epochs = 1\n")
    checkpoint = str(tmp_path / "motif.cnvn")
    assert run_cli(["finetune", "--config", config, "--data", data, "--out", checkpoint]) == 0
    report = MetricReport.from_text(open(checkpoint + ".metrics.txt").read())
    assert report.top1 is not None
    params, model_config = load_checkpoint(checkpoint)
    assert model_config.head == "sequence_class" and model_config.n_classes == 2

    assert run_cli(["eval", "--checkpoint", checkpoint, "--data", data, "--metrics", "mcc,top1"]) == 0
    first = open(checkpoint + ".eval.txt").read()
    assert "mcc=" in first and "auroc" not in first
    assert run_cli(["eval", "--checkpoint", checkpoint, "--data", data, "--metrics", "mcc,top1"]) == 0
    assert open(checkpoint + ".eval.txt").read() == first


def test_finetune_accepts_synthetic_manifest(tmp_path):
    data = make_motif_data(tmp_path)
    config = write_config(tmp_path, TINY_MODEL + "train.epochs = 0\n")
    out = str(tmp_path / "from_manifest.cnvn")
    assert run_cli(["finetune", "--config", config, "--data", data + ".json", "--out", out]) == 0
    assert (tmp_path / "from_manifest.cnvn.metrics.txt").exists()


def test_finetune_class_count_mismatch_names_both_counts(tmp_path, capsys):
    data = make_motif_data(tmp_path)
    capsys.readouterr()
    config = write_config(tmp_path, TINY_MODEL + "model.n_classes = 3\ntrain.epochs = 1\n")
    assert run_cli(["finetune", "--config", config, "--data", data, "--out", str(tmp_path / "m.cnvn")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("Error: config:")
    assert "3" in err and "2" in err
    assert len(err.splitlines()) == 1


def test_warm_start_with_scratch_comparison(tmp_path):
    corpus = tmp_path / "corpus.fa"
    corpus.write_text(">r\n" + "ACGTTGCA" * 40 + "\n")
    config = write_config(tmp_path, TINY_MODEL + "train.window_length = 64\ntrain.epochs = 1\n")
    pretrained = str(tmp_path / "pre.cnvn")
    assert run_cli(["pretrain", "--config", config, "--data", str(corpus), "--out", pretrained]) == 0

    data = make_motif_data(tmp_path)
    compare = write_config(tmp_path, TINY_MODEL + "train.epochs = 1\ncompare_scratch = true\n", "compare.cfg")
    out = str(tmp_path / "warm.cnvn")
    assert run_cli(["finetune", "--config", compare, "--checkpoint", pretrained, "--data", data, "--out", out]) == 0
    text = open(out + ".metrics.txt").read()
    assert "warm.top1=" in text and "scratch.top1=" in text


def test_pretrain_outputs_and_rerun(tmp_path, capsys):
    corpus = tmp_path / "corpus.fa"
    corpus.write_text(">chr\n" + "ACGTACGGTTCA" * 30 + "\n")
    config = write_config(tmp_path, TINY_MODEL + "train.window_length = 32\ntrain.epochs = 2\n")
    out = str(tmp_path / "pre.cnvn")
    assert run_cli(["pretrain", "--config", config, "--data", str(corpus), "--out", out, "--seed", "2"]) == 0

    losses = open(out + ".loss.csv").read()
    assert losses.splitlines()[0] == "epoch,mean_masked_loss"
    assert len(losses.splitlines()) == 3
    params, model_config = load_checkpoint(out)
    assert model_config.head == "mlm"

    assert run_cli(["rerun", out + ".manifest.json"]) == 0
    assert open(out + ".loss.csv").read() == losses


def test_rf_reports_pass_verdict(tmp_path, capsys):
    config = write_config(tmp_path, "model.hidden_dim = 4\nmodel.kernel_size = 9\nmodel.dilation_base = 4\n")
    assert run_cli(["rf", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "Analytic receptive field: 697" in out
    assert "Empirical receptive field: 697" in out
    assert "Verdict: PASS" in out
    assert "Planned dilation base for 15% of 500: 1 (receptive field 49" in out


def test_rf_measures_checkpoint_parameters(tmp_path, capsys):
    data = make_motif_data(tmp_path)
    config = write_config(tmp_path, TINY_MODEL + "train.epochs = 1\n")
    checkpoint = str(tmp_path / "motif.cnvn")
    assert run_cli(["finetune", "--config", config, "--data", data, "--out", checkpoint]) == 0
    capsys.readouterr()

    other = write_config(tmp_path, "model.hidden_dim = 4\nmodel.kernel_size = 9\nmodel.dilation_base = 4\n", "rf.cfg")
    assert run_cli(["rf", "--config", other, "--checkpoint", checkpoint]) == 0
    out = capsys.readouterr().out
    analytic = receptive_field_analytic(load_checkpoint(checkpoint)[1])
    assert analytic != 697
    assert f"Receptive field of {checkpoint} (trained parameters)" in out
    assert f"Analytic receptive field: {analytic}\n" in out
    assert f"Empirical receptive field: {analytic}\n" in out
    assert "Verdict: PASS" in out


def test_rf_unet_notice(tmp_path, capsys):
    config = write_config(tmp_path, "model.hidden_dim = 4\nmodel.variant = unet_downsample\n")
    assert run_cli(["rf", "--config", config]) == 0
    assert "unsupported for the unet_downsample variant" in capsys.readouterr().out


def test_bench_writes_csv(tmp_path):
    config = write_config(tmp_path, TINY_MODEL)
    out = tmp_path / "bench.csv"
    assert run_cli(["bench", "--config", config, "--lengths", "16,32", "--repeats", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_bench_rejects_single_repeat(tmp_path, capsys):
    config = write_config(tmp_path, TINY_MODEL)
    assert run_cli(["bench", "--config", config, "--lengths", "16", "--repeats", "1",
                    "--out", str(tmp_path / "b.csv")]) == 1
    assert capsys.readouterr().err.startswith("Error: precondition:")


def test_missing_input_file_is_an_io_error(tmp_path, capsys):
    assert run_cli(["eval", "--checkpoint", str(tmp_path / "none.cnvn"), "--data", "x.tsv"]) == 1
    assert capsys.readouterr().err.startswith("Error: io:")


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    config = write_config(tmp_path, "model.layers = 3\n")
    assert run_cli(["rf", "--config", config]) == 1
    err = capsys.readouterr().err
    assert err.startswith("Error: config:") and "model.layers" in err


def test_usage_errors_exit_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code != 0

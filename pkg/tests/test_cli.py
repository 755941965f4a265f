import pytest

from unsupseg import cli
from unsupseg.corpus import read_manifest
from unsupseg.metrics import parse_report_lines
from unsupseg.segmenter import read_boundaries


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), "--n", "20", "--seed", "5"]) == 0
    assert cli.main(["train", "--manifest", str(root / "data/train.tsv"),
                     "--val-manifest", str(root / "data/val.tsv"), "--out", str(root / "model"),
                     "--epochs", "1", "--channels", "16", "--proj-dim", "8"]) == 0
    return root


def test_synth_counts_and_determinism(tmp_path, capsys):
    code, out = run(capsys, "synth", "--out", tmp_path / "a", "--n", 100, "--seed", 0)
    assert code == 0
    rows = [line.split("\t") for line in out.splitlines()]
    assert [(r[0], int(r[1])) for r in rows] == [("train", 80), ("val", 10), ("test", 10)]
    for name in ("train", "val", "test"):
        for rec in read_manifest(tmp_path / "a" / f"{name}.tsv"):
            assert rec.audio.exists() and rec.annotation.exists()
    run(capsys, "synth", "--out", tmp_path / "b", "--n", 100, "--seed", 0)
    for wav in (tmp_path / "a" / "wav").glob("*.wav"):
        assert wav.read_bytes() == (tmp_path / "b" / "wav" / wav.name).read_bytes()


def test_train_outputs(workspace):
    model = workspace / "model"
    assert (model / "model.ckpt").exists() and (model / "history.json").exists()
    lines = (model / "train.log").read_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "train_loss", "val_loss", "seconds"]
    assert len(lines) == 2


def test_zero_epochs_is_config_error(workspace, capsys):
    code, _ = run(capsys, "train", "--manifest", workspace / "data/train.tsv",
                  "--val-manifest", workspace / "data/val.tsv", "--out", workspace / "x",
                  "--epochs", 0)
    assert code == 1


def test_missing_required_option(capsys):
    assert run(capsys, "segment", "--delta", 0.5)[0] == 1
    assert run(capsys)[0] == 1


def test_unknown_config_key(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 3\n")
    code, _ = run(capsys, "tune", "--model", workspace / "model/model.ckpt",
                  "--manifest", workspace / "data/val.tsv", "--config", cfg)
    assert code == 1


def test_config_precedence(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"model = {workspace / 'model/model.ckpt'}\ndelta = 0.3\ntolerance = 0.05\n")
    args = cli.parse_args(["eval", "--manifest", "m.tsv", "--config", str(cfg), "--delta", "0.7"])
    assert args.delta == 0.7  # flag beats file
    assert args.tolerance == 0.05  # file beats default
    assert args.time_offset == 0.0
    assert args.model == str(workspace / "model/model.ckpt")


def test_missing_model_is_data_error(workspace, tmp_path, capsys):
    wav = next((workspace / "data/wav").glob("*.wav"))
    code, _ = run(capsys, "segment", "--model", tmp_path / "nope.ckpt", "--wav", wav,
                  "--delta", 0.5)
    assert code == 2


def test_tune_and_eval_need_annotations(workspace, tmp_path, capsys):
    wav = next((workspace / "data/wav").glob("*.wav"))
    (tmp_path / "m.tsv").write_text(f"{wav}\n")
    for cmd in (["tune"], ["eval", "--delta", 0.5]):
        code, _ = run(capsys, *cmd, "--model", workspace / "model/model.ckpt",
                      "--manifest", tmp_path / "m.tsv")
        assert code == 2


def test_segment_outputs(workspace, tmp_path, capsys):
    model = workspace / "model/model.ckpt"
    wav = sorted((workspace / "data/wav").glob("*.wav"))[0]
    code, out = run(capsys, "segment", "--model", model, "--wav", wav, "--delta", 0.1,
                    "--dump-scores", tmp_path / "s.tsv", "--out", tmp_path / "b.txt")
    assert code == 0
    times = read_boundaries(tmp_path / "b.txt")
    assert all(a < b for a, b in zip(times, times[1:]))
    from unsupseg.corpus import load_wav
    from unsupseg.encoder import out_length, EncoderConfig
    frames = out_length(len(load_wav(wav)), EncoderConfig())
    assert len((tmp_path / "s.tsv").read_text().splitlines()) == frames - 1
    code, out = run(capsys, "segment", "--model", model, "--wav", wav, "--delta", 1.0)
    assert code == 0 and len(out.split()) <= 1


def test_tune_table_and_best(workspace, capsys):
    for metric, col in (("rval", 5), ("f1", 3)):
        code, out = run(capsys, "tune", "--model", workspace / "model/model.ckpt",
                        "--manifest", workspace / "data/val.tsv", "--metric", metric)
        assert code == 0
        lines = out.splitlines()
        rows = [line.split("\t") for line in lines[1:22]]
        assert len(rows) == 21 and float(rows[0][0]) == 0 and float(rows[-1][0]) == 1
        best = dict(line.split("\t") for line in lines[22:])
        top = max(float(r[col]) for r in rows)
        assert float(best[f"best_{metric}"]) == pytest.approx(top, abs=0.005)
        chosen = next(r for r in rows if float(r[0]) == float(best["best_delta"]))
        assert float(chosen[col]) == top


def test_eval_machine_lines(workspace, tmp_path, capsys):
    code, out = run(capsys, "eval", "--model", workspace / "model/model.ckpt",
                    "--manifest", workspace / "data/test.tsv", "--delta", 0.3,
                    "--per-utterance", tmp_path / "per.tsv")
    assert code == 0
    parsed = parse_report_lines([line for line in out.splitlines() if "\t" in line])
    for key in ("P", "R", "F1", "OS", "R-value", "hits", "pred_count", "gold_count"):
        assert key in parsed
    assert 0 <= parsed["F1"] <= 100
    assert len((tmp_path / "per.tsv").read_text().splitlines()) == 3
    assert cli.parse_args(["eval", "--model", "m", "--manifest", "x", "--delta", "0.5"]).tolerance == 0.02

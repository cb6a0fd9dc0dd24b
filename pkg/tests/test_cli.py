import json

import pytest

from motion_analogy.cli import RunConfig, main
from motion_analogy.synthdata import load_clip
from motion_analogy.transfer import RUN_OUTPUTS


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_key_is_rejected(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[codec]\niterations = 3\nlearnig_rate = 0.1\n")
    code, out, err = _run(capsys, "train-codec", "--config", str(ini), "--out", str(tmp_path / "o"))
    assert code != 0
    assert "learnig_rate" in err
    assert len(err.strip().splitlines()) == 1
    code, _, err = _run(capsys, "gen-data", "--set", "data.bogus=1", "--out", str(tmp_path / "p"))
    assert code != 0 and "bogus" in err


def test_bad_value_type_is_rejected(tmp_path, capsys):
    code, _, err = _run(capsys, "gen-data", "--set", "data.n_videos=many", "--out", str(tmp_path / "o"))
    assert code != 0 and "n_videos" in err


def test_config_round_trip(tmp_path):
    cfg = RunConfig.load(None, ["codec.iterations=7", "transfer.gamma=0.25"], seed=3)
    (tmp_path / "c.ini").write_text(cfg.to_ini())
    again = RunConfig.load(tmp_path / "c.ini")
    assert again.section("codec")["iterations"] == 7
    assert again.section("transfer")["gamma"] == 0.25
    assert again.seed == 3


def test_demo_pair_and_existing_out(tmp_path, capsys):
    out = tmp_path / "demo"
    code, stdout, _ = _run(capsys, "demo-pair", "--out", str(out))
    assert code == 0
    assert json.loads(stdout)["source"] == "turtle"
    assert load_clip(out / "source").label == "turtle"
    assert load_clip(out / "driving").label == "rhino"
    assert (out / "config.ini").exists()
    code, _, err = _run(capsys, "demo-pair", "--out", str(out))
    assert code != 0 and "already exists" in err


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    code, _, err = _run(capsys, "finetune", "--set", f"finetune.codec={tmp_path / 'nope.pt'}",
                        "--out", str(tmp_path / "o"))
    assert code != 0 and "not found" in err


def test_tiny_end_to_end(tmp_path, capsys):
    d = tmp_path
    assert _run(capsys, "gen-data", "--set", "data.n_videos=4", "--out", str(d / "data"))[0] == 0
    assert _run(capsys, "train-codec", "--set", f"codec.data={d / 'data' / 'clips'}", "--set", "codec.width=16",
                "--set", "codec.iterations=2", "--set", "codec.batch_size=4", "--out", str(d / "codec"))[0] == 0
    codec = d / "codec" / "codec.pt"
    assert _run(capsys, "train-lofnet", "--set", f"lofnet.data={d / 'data' / 'clips'}",
                "--set", f"lofnet.codec={codec}", "--set", "lofnet.width=16", "--set", "lofnet.iterations=1",
                "--set", "lofnet.batch_size=2", "--set", "lofnet.eval_pairs=4", "--out", str(d / "lof"))[0] == 0
    assert _run(capsys, "train-diffusion", "--set", f"diffusion.data={d / 'data' / 'clips'}",
                "--set", f"diffusion.codec={codec}", "--set", "diffusion.width=32",
                "--set", "diffusion.iterations=1", "--set", "diffusion.batch_size=1",
                "--out", str(d / "diff"))[0] == 0
    models = ["--set", f"finetune.codec={codec}", "--set", f"finetune.lofnet={d / 'lof' / 'lofnet.pt'}",
              "--set", f"finetune.base={d / 'diff' / 'denoiser.pt'}", "--set", "finetune.iterations=2"]
    code, out, err = _run(capsys, "finetune", *models, "--out", str(d / "ft"))
    assert code == 0, err
    assert (d / "ft" / "adapter.pt").exists()
    code, out, err = _run(capsys, "transfer", *models, "--set", f"transfer.adapter={d / 'ft' / 'adapter.pt'}",
                          "--set", "transfer.steps=4", "--set", "transfer.t_inv=900", "--out", str(d / "run"))
    assert code == 0, err
    run = d / "run"
    assert sorted(p.name for p in run.iterdir()) == sorted(RUN_OUTPUTS)
    manifest = json.loads((run / "manifest.json").read_text())
    resolved = manifest["run"]["resolved_config"]
    assert resolved["transfer"]["steps"] == 4 and resolved["finetune"]["iterations"] == 2
    assert len(load_clip(run, sidecar="manifest.json")) == 10
    code, out, err = _run(capsys, "eval", "--set", f"eval.runs={run}", "--set", f"finetune.codec={codec}",
                          "--out", str(d / "eval"))
    assert code == 0, err
    assert "run" in (d / "eval" / "table.md").read_text()


@pytest.mark.parametrize("argv", [["transfer"], ["eval", "--out"]])
def test_argparse_errors_exit_nonzero(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code != 0

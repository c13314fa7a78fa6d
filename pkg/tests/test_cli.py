import subprocess
import sys

import numpy as np
import pytest

from lsakit import checkpoint
from lsakit.cli import main
from lsakit.model import model_a, model_b

TINY = """[dataset]
n_train = 200
n_test = 200
[trainer]
epochs = 2
log_eval_size = 50
[lsa]
M = 40
[boundary]
resolution = 8
n_adv = 20
[repro]
variants = Normal, AT-FGSM, AT-FGSM-LR-L2
boundary_variants = AT-FGSM
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_train_lsa_eval_boundary(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--out", str(out)]) == 0
    ckpt = out / "model.ckpt"
    assert ckpt.exists() and (out / "train_log.csv").exists() and (out / "resolved.cfg").exists()
    assert checkpoint.read_meta(ckpt)["epoch"] == "2"
    assert main(["lsa", "--config", str(tiny), "--out", str(out / "lsa"), str(ckpt)]) == 0
    assert "MVL:" in capsys.readouterr().out
    assert (out / "lsa" / "lsa_curves.svg").exists()
    assert main(["eval", "--config", str(tiny), "--out", str(out / "eval"), str(ckpt), str(ckpt)]) == 0
    assert (out / "eval" / "leaderboard.csv").read_text().startswith("model_tag,acc@0,")
    assert main(["boundary", "--config", str(tiny), "--out", str(out / "b"), str(ckpt)]) == 0
    assert (out / "b" / "boundary.csv").exists()


def test_seed_flag_changes_the_run(tiny, tmp_path):
    main(["train", "--config", str(tiny), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["train", "--config", str(tiny), "--out", str(tmp_path / "b"), "--seed", "2"])
    a = checkpoint.load(tmp_path / "a" / "model.ckpt").parameters()[0].data
    b = checkpoint.load(tmp_path / "b" / "model.ckpt").parameters()[0].data
    assert not np.array_equal(a, b)
    assert "seed = 1" in (tmp_path / "a" / "resolved.cfg").read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[trainer]\nkind = sgd\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "trainer.kind" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2

    checkpoint.save(model_b(0), tmp_path / "b.ckpt")
    assert main(["boundary", "--config", str(tiny), "--out", str(tmp_path / "o"), str(tmp_path / "b.ckpt")]) == 5
    assert main(["lsa", "--config", str(tiny), "--out", str(tmp_path / "o"), str(tmp_path / "b.ckpt")]) == 4
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert main(["eval", "--config", str(tiny), "--out", str(tmp_path / "o"), str(tmp_path / "junk.ckpt")]) == 4
    other = tmp_path / "other.cfg"
    other.write_text("[model]\nlayers = Linear(5) => ELU => Linear(1)\ninput_shape = 2\n")
    checkpoint.save(model_a(0), tmp_path / "a.ckpt")
    assert main(["eval", "--config", str(other), "--out", str(tmp_path / "o"), str(tmp_path / "a.ckpt")]) == 4

    diverge = tmp_path / "div.cfg"
    diverge.write_text(TINY.replace("epochs = 2", "epochs = 2\nlr = 1e300"))
    assert main(["train", "--config", str(diverge), "--out", str(tmp_path / "d")]) == 3
    assert "diverged" in capsys.readouterr().err


def test_repro_suite_outputs(tiny, tmp_path):
    out = tmp_path / "r"
    assert main(["repro", "--config", str(tiny), "--out", str(out)]) == 0
    for name in ("resolved.cfg", "leaderboard.csv", "robust_grid.csv", "rg_histogram.svg", "mvl.txt",
                 "checkpoints/moon-AT-FGSM-LR-L2.ckpt", "boundary/AT-FGSM/boundary.csv"):
        assert (out / name).exists(), name
    assert len((out / "leaderboard.csv").read_text().splitlines()) == 4
    assert main(["repro", "mnist", "--config", str(tiny), "--out", str(out)]) == 2


def test_repro_needs_a_suite(capsys):
    with pytest.raises(SystemExit) as e:
        main(["repro"])
    assert e.value.code == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "lsakit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "lsa", "eval", "boundary", "repro"):
        assert cmd in r.stdout

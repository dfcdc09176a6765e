import numpy as np
import pytest

from avdct.cli import main
from avdct.evalkit import Recording, checkpoint_load, load_recording, save_recording, synthetic_recording


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = d / "data"
    data.mkdir()
    save_recording(synthetic_recording(4, 16 * 20, amplitude=10, seed=1), data / "a.csv")
    save_recording(synthetic_recording(4, 16 * 10, amplitude=10, seed=2), data / "b.bin")
    rc = main(["train", "--data", str(data), "--out", str(d / "m.ckpt"), "--epochs", "2", "--block", "16",
               "--heads", "2", "--history", str(d / "hist.csv")])
    assert rc == 0
    return d


def test_train_writes_checkpoint_and_history(workdir):
    ck = checkpoint_load(workdir / "m.ckpt")
    assert ck.hyper["L"] == 16 and ck.hyper["C"] == 4 and ck.hyper["epsilon"] == 1e-6
    assert len((workdir / "hist.csv").read_text().splitlines()) >= 2


def test_encode_decode_eval(workdir, capsys):
    d, rec = workdir, workdir / "data" / "a.csv"
    assert main(["encode", "--ckpt", str(d / "m.ckpt"), "--in", str(rec), "--out", str(d / "a.avb")]) == 0
    assert main(["decode", "--ckpt", str(d / "m.ckpt"), "--in", str(d / "a.avb"), "--out", str(d / "a_rec.csv"),
                 "--original", str(rec)]) == 0
    assert load_recording(d / "a_rec.csv").data.shape == (4, 320)
    capsys.readouterr()
    assert main(["eval", "--original", str(rec), "--reconstructed", str(d / "a_rec.csv"),
                 "--compressed", str(d / "a.avb"), "--csv", str(d / "m.csv")]) == 0
    assert "CR=" in capsys.readouterr().out
    assert (d / "m.csv").read_text().startswith("recording,cr,prd")


def test_edge_loopback_matches_offline_decode(workdir):
    d, rec = workdir, workdir / "data" / "a.csv"
    main(["encode", "--ckpt", str(d / "m.ckpt"), "--in", str(rec), "--out", str(d / "b.avb")])
    main(["decode", "--ckpt", str(d / "m.ckpt"), "--in", str(d / "b.avb"), "--out", str(d / "off.csv"),
          "--original", str(rec)])
    assert main(["edge", "--ckpt", str(d / "m.ckpt"), "--in", str(rec), "--loopback",
                 "--out", str(d / "loop.csv")]) == 0
    assert (d / "loop.csv").read_bytes() == (d / "off.csv").read_bytes()


def test_simulate(tmp_path, capsys):
    assert main(["simulate", "--sizes", "100,200,300", "--bandwidth", "100", "--latency", "0.01"]) == 0
    assert "time=6.03s" in capsys.readouterr().out
    (tmp_path / "s.csv").write_text("1000\n")
    assert main(["simulate", "--sizes", str(tmp_path / "s.csv"), "--bandwidth", "1000"]) == 0
    assert "time=1s" in capsys.readouterr().out


def test_exit_codes(workdir, tmp_path):
    ck = str(workdir / "m.ckpt")
    # configuration
    assert main(["simulate", "--sizes", "1", "--bandwidth", "0"]) == 2
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    assert main(["encode", "--ckpt", str(tmp_path / "bad.ckpt"), "--in", "x.csv", "--out", "y"]) == 2
    # ingestion
    assert main(["encode", "--ckpt", ck, "--in", str(tmp_path / "none.csv"), "--out", "y"]) == 3
    # bitstream
    (tmp_path / "broken.avb").write_bytes(b"\x10\x00\x00\x00AVDC")
    assert main(["decode", "--ckpt", ck, "--in", str(tmp_path / "broken.avb"), "--out", str(tmp_path / "o.csv")]) == 4
    # divergence
    data = tmp_path / "huge"
    data.mkdir()
    save_recording(Recording(np.full((4, 64), 1e200) * np.arange(1, 65)), data / "h.csv")
    with pytest.warns(RuntimeWarning):
        rc = main(["train", "--data", str(data), "--out", str(tmp_path / "h.ckpt"), "--block", "16",
                   "--heads", "2", "--epochs", "2"])
    assert rc == 5


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["edge", "--ckpt", "x", "--in", "y"])
    assert info.value.code == 2

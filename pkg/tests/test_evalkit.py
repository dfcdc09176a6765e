import json
import math

import numpy as np
import pytest

from avdct.errors import (
    ArchitectureMismatchError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DegenerateSignalError,
    IngestionError,
    LengthMismatchError,
    NonFiniteValueError,
    RecordingParseError,
)
from avdct.evalkit import (
    Checkpoint,
    MetricsRecord,
    Recording,
    average_metrics,
    checkpoint_load,
    checkpoint_save,
    compute_metrics,
    load_recording,
    pooled_metrics,
    reassemble,
    save_recording,
    segment_frames,
    synthetic_recording,
    write_metrics_csv,
)
from avdct.objective import init_model


def test_prd_hand_example():
    m = compute_metrics([3.0, 4.0], [3.0, 0.0], raw_bytes=16, compressed_bytes=4)
    assert m.prd == pytest.approx(80.0, rel=1e-14)
    assert m.cr == 4.0
    # mean 3.5, spread 0.5 -> sqrt(16 / 0.5)
    assert m.prdn == pytest.approx(100 * math.sqrt(32), rel=1e-14)
    assert m.qs == pytest.approx(4.0 / 80.0)


def test_quality_score_from_ratio():
    m = MetricsRecord(7.82, 17.07, 0.0, 7.82 / 17.07, 0, 0)
    assert round(m.qs, 3) == 0.458


def test_perfect_reconstruction_has_infinite_qs():
    m = compute_metrics([1.0, 2.0], [1.0, 2.0], 16, 2)
    assert m.prd == 0.0 and m.qs_infinite


@pytest.mark.parametrize("orig", [[0.0, 0.0], [2.0, 2.0]])
def test_degenerate_originals(orig):
    with pytest.raises(DegenerateSignalError):
        compute_metrics(orig, [1.0, 1.0], 16, 2)


def test_pooled_versus_averaged():
    a = (np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    b = (np.array([10.0, 20.0]), np.array([10.0, 20.0]))
    pooled = pooled_metrics([a, b], 64, 8)
    assert pooled.prd == pytest.approx(100 * math.sqrt(1 / 505))
    avg = average_metrics([compute_metrics(*a, 32, 4), compute_metrics(*b, 32, 4)])
    assert avg.prd == pytest.approx(100 * math.sqrt(1 / 5) / 2)


def test_metrics_csv(tmp_path):
    m = compute_metrics([3.0, 4.0], [3.0, 0.0], 16, 4)
    write_metrics_csv(tmp_path / "m.csv", [("rec1", m)])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "recording,cr,prd,prdn,qs,raw_bytes,compressed_bytes"
    assert lines[1].startswith("rec1,4.0,80.0")


def test_segment_frame_count():
    rec = Recording(np.zeros((3, 7560)))
    assert segment_frames(rec, 64).shape == (118, 3, 64)


def test_segment_and_reassemble_round_trip():
    data = np.arange(2 * 130, dtype=float).reshape(2, 130)
    frames = segment_frames(Recording(data), 64)
    assert frames.shape == (2, 2, 64)
    np.testing.assert_array_equal(frames[1, 0], data[0, 64:128])
    np.testing.assert_array_equal(reassemble(frames), data[:, :128])


def test_segment_standardize():
    rec = synthetic_recording(3, 640, seed=1)
    frames = segment_frames(rec, 64, standardize=True)
    flat = reassemble(frames)
    np.testing.assert_allclose(flat.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(flat.std(axis=1), 1, atol=1e-12)


def test_short_recording_yields_no_frames():
    assert segment_frames(Recording(np.ones((2, 10))), 64).shape == (0, 2, 64)


def test_recording_validation():
    with pytest.raises(NonFiniteValueError):
        Recording(np.array([[1.0, np.nan]]))
    with pytest.raises(LengthMismatchError):
        Recording(np.zeros((2, 4)), names=["a"])
    assert Recording(np.zeros((2, 1))).names == ["ch0", "ch1"]


@pytest.mark.parametrize("name,dtype", [("r.csv", "f64"), ("r.bin", "f64"), ("r.bin", "f32")])
def test_recording_round_trip(tmp_path, name, dtype):
    rec = synthetic_recording(3, 200, sample_rate=250.0, seed=2)
    rec.names = ["Fz", "Cz", "Pz"]
    save_recording(rec, tmp_path / name, dtype=dtype)
    back = load_recording(tmp_path / name)
    assert back.names == rec.names and back.sample_rate == 250.0
    tol = 0 if dtype == "f64" else 1e-6
    np.testing.assert_allclose(back.data, rec.data, rtol=tol, atol=tol)


def test_csv_errors(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(LengthMismatchError):
        load_recording(p)
    p.write_text("a,b\n1,zz\n")
    with pytest.raises(RecordingParseError):
        load_recording(p)
    p.write_text("a\n1\nnan\n")
    with pytest.raises(NonFiniteValueError):
        load_recording(p)
    with pytest.raises(IngestionError):
        load_recording(tmp_path / "missing.csv")


def test_binary_errors(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"\x00" * 12)
    with pytest.raises(IngestionError):
        load_recording(p)
    (tmp_path / "x.bin.json").write_text(json.dumps({"channels": 2, "samples": 1}))
    with pytest.raises(LengthMismatchError):
        load_recording(p)


def test_synthetic_recording_is_seeded_and_scaled():
    a = synthetic_recording(4, 1000, amplitude=10, noise=0.0, seed=9)
    b = synthetic_recording(4, 1000, amplitude=10, noise=0.0, seed=9)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.sqrt(np.mean(a.data**2)) == pytest.approx(10.0)


def _checkpoint():
    enc, dec = init_model(4, 8, 3, 2, seed=1)
    return Checkpoint.from_models(enc, dec, {"L": 8, "C": 4, "N": 3, "h": 2, "tau": 2, "omega": 1.2})


def test_checkpoint_round_trip(tmp_path):
    ck = _checkpoint()
    checkpoint_save(ck, tmp_path / "m.ckpt")
    back = checkpoint_load(tmp_path / "m.ckpt", expect={"C": 4})
    assert back.hyper == ck.hyper
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    assert back.decoder().mha.heads == 2 and back.encoder().subbands == 3


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint_save(_checkpoint(), path)
    blob = path.read_bytes()
    with pytest.raises(ArchitectureMismatchError):
        checkpoint_load(path, expect={"C": 8})
    path.write_bytes(blob[:-8])
    with pytest.raises(CheckpointTruncatedError):
        checkpoint_load(path)
    path.write_bytes(blob[:4] + b"\x02" + blob[5:])
    with pytest.raises(CheckpointVersionError):
        checkpoint_load(path)
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint_load(path)
    bad = _checkpoint()
    bad.params["dec.post_w"] = np.eye(3)
    with pytest.raises(ArchitectureMismatchError):
        checkpoint_save(bad, path)

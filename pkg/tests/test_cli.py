import csv
import hashlib
import subprocess
import sys

import numpy as np
import pytest

from shiftlic.cli import main
from shiftlic.imageio import procedural_texture, read_ppm, write_ppm
from shiftlic.metrics import psnr


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_ppm(d / "img.ppm", procedural_texture(70, 90, np.random.default_rng(0)))
    code = main(["train", "--config", "tiny", "--steps", "4", "--overfit", str(d / "img.ppm"),
                 "--out", str(d / "m.ckpt"), "--csv", str(d / "loss.csv")])
    assert code == 0
    return d


def test_train_writes_curve(workspace):
    rows = list(csv.reader(open(workspace / "loss.csv")))
    assert rows[0] == ["step", "L", "R", "D", "lr"] and len(rows) == 5


def test_encode_decode_round_trip(workspace, capsys):
    src = workspace / "img.ppm"
    before = hashlib.sha256(src.read_bytes()).hexdigest()
    code, out, _ = run(capsys, "encode", src, "-c", workspace / "m.ckpt", "-o", workspace / "a.slic")
    assert code == 0
    size = (workspace / "a.slic").stat().st_size
    assert f"{size} bytes" in out and f"{8 * size / (70 * 90):.4f} bpp" in out
    run(capsys, "encode", src, "-c", workspace / "m.ckpt", "-o", workspace / "b.slic")
    assert (workspace / "a.slic").read_bytes() == (workspace / "b.slic").read_bytes()

    code, out, _ = run(capsys, "decode", workspace / "a.slic", "-c", workspace / "m.ckpt",
                       "-o", workspace / "rec.ppm", "--reference", src)
    assert code == 0
    rec = read_ppm(workspace / "rec.ppm")
    assert rec.shape == (3, 70, 90)
    assert f"PSNR {psnr(read_ppm(src), rec):.4f} dB" in out
    assert hashlib.sha256(src.read_bytes()).hexdigest() == before

    code, _, _ = run(capsys, "encode", workspace / "rec.ppm", "-c", workspace / "m.ckpt",
                     "-o", workspace / "c.slic")
    assert code == 0


def test_truncated_stream(workspace, capsys):
    run(capsys, "encode", workspace / "img.ppm", "-c", workspace / "m.ckpt", "-o", workspace / "t.slic")
    data = (workspace / "t.slic").read_bytes()
    (workspace / "t.slic").write_bytes(data[:-1])
    code, _, err = run(capsys, "decode", workspace / "t.slic", "-c", workspace / "m.ckpt",
                       "-o", workspace / "t.ppm")
    assert code == 1 and err.startswith("shiftlic-error: bitstream:")
    assert not (workspace / "t.ppm").exists()
    assert not list(workspace.glob("t.ppm*"))


def test_config_mismatch(workspace, capsys):
    code, _, err = run(capsys, "encode", workspace / "img.ppm", "-c", workspace / "m.ckpt",
                       "-o", workspace / "x.slic", "--config", "tiny-small")
    assert code == 1 and "shiftlic-error: config:" in err


def test_usage_errors(capsys):
    code, _, err = run(capsys, "train", "--lambda-index", "9")
    assert code == 2 and err.startswith("shiftlic-error: usage:")
    code, _, _ = run(capsys, "encode", "--bogus-flag")
    assert code == 2


def test_seed_env_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SHIFTLIC_SEED", "11")
    for name in ("a", "b"):
        code, _, _ = run(capsys, "train", "--config", "tiny-small", "--steps", "2", "--textures", "2",
                         "--seed", "0" if name == "a" else "5",
                         "--out", tmp_path / f"{name}.ckpt", "--csv", tmp_path / f"{name}.csv")
        assert code == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    monkeypatch.setenv("SHIFTLIC_SEED", "x")
    code, _, err = run(capsys, "train", "--config", "tiny", "--steps", "1")
    assert code == 2 and "SHIFTLIC_SEED" in err


def test_eval(workspace, capsys, tmp_path):
    write_ppm(tmp_path / "a.ppm", procedural_texture(64, 64, np.random.default_rng(1)))
    (tmp_path / "broken.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    code, out, _ = run(capsys, "eval", tmp_path, "-c", workspace / "m.ckpt", "--csv", tmp_path / "rd.csv")
    assert code == 0 and "1 images (1 skipped)" in out
    code, _, err = run(capsys, "eval", tmp_path / "missing", "-c", workspace / "m.ckpt")
    assert code == 1 and "shiftlic-error: data:" in err


def test_analyze(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", "--config", "tiny", "--size", "128x64",
                       "--csv", tmp_path / "c.csv", "--bd", "-10")
    assert code == 0
    assert "KMACs/pixel" in out and "dev" in out and "BD-rate/MACs" in out
    assert (tmp_path / "c.csv").read_text().startswith("layer,kind")
    code, _, err = run(capsys, "analyze", "--size", "100x64")
    assert code == 2


def test_bdrate(capsys, tmp_path):
    pts = "bpp,quality_db\n0.1,27\n0.2,29.5\n0.4,32\n0.8,34.8\n"
    (tmp_path / "a.csv").write_text(pts)
    (tmp_path / "b.csv").write_text(pts)
    code, out, _ = run(capsys, "bdrate", tmp_path / "a.csv", tmp_path / "b.csv")
    assert code == 0 and out.strip() == "BD-rate: 0.00%"
    (tmp_path / "c.csv").write_text("bpp,quality_db\n0.1,27\n0.2,28\n")
    code, _, err = run(capsys, "bdrate", tmp_path / "a.csv", tmp_path / "c.csv")
    assert code == 1 and err.startswith("shiftlic-error: bdrate:")


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "shiftlic.cli", "bdrate", "nope.csv", "nope.csv"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1 and proc.stderr.startswith("shiftlic-error: io:")

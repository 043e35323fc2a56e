import csv
import json

import numpy as np
import pytest
import torch

from stavc import codec
from stavc.cli import EXIT_CODEC, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from stavc.data import load_frames
from stavc.transforms import VariantConfig, VideoModel

SMALL = dict(channels=8, latent_channels=4, hyper_channels=2, gate_channels=4, blocks=2, depth=3)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for variant, beta in (("STAT_SSF", 0.01), ("SSF", 0.02)):
        VideoModel.create(VariantConfig(variant, **SMALL), seed=0).save(root / f"{variant}.ckpt", beta=beta)
    assert main(["gen-data", "--output", str(root / "data"), "--clips", "2", "--frames", "3",
                 "--size", "32"]) == EXIT_OK
    return root


def test_gen_data_layout(workspace):
    dirs = sorted((workspace / "data").iterdir())
    assert [d.name for d in dirs] == ["clip_0000", "clip_0001"]
    clip = load_frames(dirs[0])
    assert clip.frames.shape == (3, 3, 32, 32)


def test_encode_decode_eval(workspace, capsys, tmp_path):
    clip_dir = workspace / "data" / "clip_0000"
    ckpt = workspace / "STAT_SSF.ckpt"
    code, out, _ = run(capsys, "encode", "--input", clip_dir, "--checkpoint", ckpt,
                       "--output", tmp_path / "s.bin", "--dump-scale-space", tmp_path / "ss")
    assert code == EXIT_OK
    enc = json.loads(out)
    assert enc["bytes"] == (tmp_path / "s.bin").stat().st_size
    assert enc["bpp"] == pytest.approx(8 * enc["bytes"] / (3 * 32 * 32))
    assert len(list((tmp_path / "ss").glob("*.png"))) == 4  # depth 3 -> 4 levels

    code, out, _ = run(capsys, "decode", "--input", tmp_path / "s.bin", "--checkpoint", ckpt,
                       "--output", tmp_path / "dec")
    assert code == EXIT_OK and json.loads(out)["frames"] == 3
    decoded = load_frames(tmp_path / "dec")
    assert decoded.frames.shape == (3, 3, 32, 32)

    code, out, _ = run(capsys, "eval", "--input", clip_dir, "--checkpoint", ckpt)
    ev = json.loads(out)
    assert code == EXIT_OK
    assert ev["bpp"] == pytest.approx(enc["bpp"])
    assert len(ev["frame_psnr"]) == 3 and ev["estimated_bpp"] <= ev["bpp"]
    # PNG output is 8-bit, so it sits within half a code value of the float reconstruction
    model, _ = VideoModel.load(ckpt)
    recon = codec.decode_video((tmp_path / "s.bin").read_bytes(), model)
    assert np.abs(decoded.frames.numpy() - recon.numpy()).max() <= 0.5 / 255 + 1e-12


def test_sweep_outputs(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "sweep", "--checkpoint", workspace / "STAT_SSF.ckpt",
                       "--checkpoint", workspace / "SSF.ckpt", "--input", workspace / "data" / "clip_0000",
                       "--output", tmp_path / "rd.csv", "--table", tmp_path / "t.md",
                       "--json", tmp_path / "r.json", "--no-timing")
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "rd.csv")))
    assert sorted(r["variant"] for r in rows) == ["SSF", "STAT_SSF"]
    assert all(r["seconds"] == "0.000" for r in rows)
    assert out == (tmp_path / "rd.csv").read_text()
    assert "STAT_SSF bpp" in (tmp_path / "t.md").read_text()
    assert len(json.loads((tmp_path / "r.json").read_text())["points"]) == 2


def test_train_command(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--variant", "TAT", "--steps", "2", "--batch", "1",
                       "--crop", "16", "--source-size", "32", "--output", tmp_path)
    assert code == EXIT_OK
    info = json.loads(out)
    assert info["final"]["step"] == 1
    model, meta = VideoModel.load(info["checkpoint"])
    assert model.cfg.variant.name == "TAT" and meta["step"] == 2


def test_usage_errors(workspace, capsys, tmp_path):
    assert run(capsys, "bogus")[0] == EXIT_USAGE
    assert run(capsys, "encode", "--input", "x")[0] == EXIT_USAGE
    assert run(capsys, "train", "--steps", "many", "--output", tmp_path)[0] == EXIT_USAGE
    code, _, err = run(capsys, "eval", "--input", workspace / "data" / "clip_0000",
                       "--checkpoint", workspace / "SSF.ckpt", "--variant", "TAT")
    assert code == EXIT_USAGE and "does not match" in err
    assert run(capsys, "--help")[0] == EXIT_OK


def test_data_and_codec_errors(workspace, capsys, tmp_path):
    ckpt = workspace / "SSF.ckpt"
    assert run(capsys, "eval", "--input", tmp_path / "missing", "--checkpoint", ckpt)[0] == EXIT_DATA
    (tmp_path / "junk.bin").write_bytes(b"not a stream at all")
    code, _, err = run(capsys, "decode", "--input", tmp_path / "junk.bin", "--checkpoint", ckpt,
                       "--output", tmp_path / "o")
    assert code == EXIT_DATA and "data error" in err
    broken = tmp_path / "broken.ckpt"
    model, meta = VideoModel.load(ckpt)
    with torch.no_grad():
        model.iframe.analysis.last.bias[0] = 1e6
    model.save(broken, beta=meta["beta"])
    code, _, err = run(capsys, "encode", "--input", workspace / "data" / "clip_0000",
                       "--checkpoint", broken, "--output", tmp_path / "x.bin")
    assert code == EXIT_CODEC and "codec error" in err

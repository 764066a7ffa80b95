import json
import os
import struct
from pathlib import Path

import numpy as np
import pytest

# hub lookups must fail fast and deterministically in sandboxed runs
os.environ.setdefault("HF_HUB_OFFLINE", "1")

from teacher_export.cli import main
from teacher_export.encoders import (EncoderUnavailable, RandomProjectionEncoder,
                                     resolve_encoder, silhouette_raster,
                                     text_ngram_counts)
from teacher_export.exporter import ExportJob, export_embeddings, prompt_strings
from teacher_export.formats import FormatError, read_rcemb, read_rcpts, write_rcemb


def write_rcpts(path, pts):
    pts = np.ascontiguousarray(pts, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"RCPTS1")
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


@pytest.fixture()
def tiny_manifest(tmp_path):
    rng = np.random.default_rng(3)
    (tmp_path / "clouds").mkdir()
    samples = []
    classes = ["sphere", "cube", "cone"]
    for cid, name in enumerate(classes):
        for j in range(2):
            sid = f"{name}_{j:04d}"
            pts = rng.normal(size=(64, 3)).astype(np.float32)
            pts /= np.abs(pts).max()
            write_rcpts(tmp_path / "clouds" / f"{sid}.rcpts", pts)
            samples.append({"id": sid, "class_name": name, "class_id": cid,
                            "pointcloud_path": f"clouds/{sid}.rcpts",
                            "image_emb_id": sid, "text": name})
    manifest = {"samples": samples, "classes": classes,
                "split": {"train": [s["id"] for s in samples[:4]],
                          "test": [s["id"] for s in samples[4:]]}}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestEncoders:
    def test_rp_name_resolution(self):
        enc = resolve_encoder("rp-32", "text")
        assert isinstance(enc, RandomProjectionEncoder)
        assert enc.dim == 32

    def test_hub_encoder_unavailable_offline(self):
        with pytest.raises(EncoderUnavailable):
            resolve_encoder("definitely-not-a-cached-model/vit-base", "image")

    def test_text_features_unit_norm_and_deterministic(self):
        enc = RandomProjectionEncoder(48)
        a = enc.encode_text("A point cloud of a chair.")
        b = enc.encode_text("A point cloud of a chair.")
        np.testing.assert_array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-5)
        c = enc.encode_text("A point cloud of a table.")
        assert not np.array_equal(a, c)

    def test_image_features_unit_norm(self, rng=np.random.default_rng(0)):
        enc = RandomProjectionEncoder(48)
        pts = rng.normal(size=(128, 3)) * 0.4
        v = enc.encode_image(pts)
        assert v.shape == (48,)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-5)

    def test_silhouette_shape(self):
        pts = np.zeros((10, 3))
        assert silhouette_raster(pts).shape == (3 * 32 * 32,)

    def test_ngram_counts_normalized(self):
        v = text_ngram_counts("chair")
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)


class TestPrompts:
    def test_grid_is_80(self):
        grid = prompt_strings("chair", "grid")
        assert len(grid) == 80
        assert len(set(grid)) == 80

    def test_plain_is_single(self):
        assert prompt_strings("chair", "plain") == ["chair"]


class TestExport:
    def test_text_plain_one_record_per_class(self, tiny_manifest, tmp_path):
        out = tmp_path / "text.rcemb"
        job = ExportJob(tiny_manifest, "text", "rp-24", out, prompt_mode="plain")
        result = export_embeddings(job)
        assert result["records"] == 3
        dim, records = read_rcemb(out)
        assert dim == 24
        for rid, vec in records:
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-5)

    def test_text_grid_record_count(self, tiny_manifest, tmp_path):
        out = tmp_path / "grid.rcemb"
        export_embeddings(ExportJob(tiny_manifest, "text", "rp-16", out))
        dim, records = read_rcemb(out)
        assert len(records) == 3 * 80

    def test_image_one_record_per_sample(self, tiny_manifest, tmp_path):
        out = tmp_path / "img.rcemb"
        result = export_embeddings(ExportJob(tiny_manifest, "image", "rp-16", out))
        assert result["records"] == 6
        dim, records = read_rcemb(out)
        assert [rid for rid, _ in records] == [
            "sphere_0000", "sphere_0001", "cube_0000", "cube_0001",
            "cone_0000", "cone_0001"]

    def test_reexport_byte_identical(self, tiny_manifest, tmp_path):
        a, b = tmp_path / "a.rcemb", tmp_path / "b.rcemb"
        for out in (a, b):
            export_embeddings(ExportJob(tiny_manifest, "image", "rp-32", out))
        assert a.read_bytes() == b.read_bytes()

    def test_missing_cloud_raises(self, tiny_manifest, tmp_path):
        manifest = json.loads(tiny_manifest.read_text())
        manifest["samples"][0]["pointcloud_path"] = "clouds/gone.rcpts"
        broken = tmp_path / "broken.json"
        broken.write_text(json.dumps(manifest))
        from teacher_export.encoders import MissingAsset
        with pytest.raises(MissingAsset):
            export_embeddings(ExportJob(broken, "image", "rp-16", tmp_path / "x.rcemb"))


class TestCli:
    def test_export_and_exit_codes(self, tiny_manifest, tmp_path, capsys):
        out = tmp_path / "cli.rcemb"
        code = main(["export", "--manifest", str(tiny_manifest), "--modality", "text",
                     "--encoder", "rp-16", "--out", str(out)])
        assert code == 0
        payload = json.loads(capsys.readouterr().out.strip())
        assert payload["records"] == 240
        assert out.exists()

    def test_unavailable_encoder_exits_nonzero(self, tiny_manifest, tmp_path, capsys):
        code = main(["export", "--manifest", str(tiny_manifest), "--modality", "text",
                     "--encoder", "not-a-real/model", "--out", str(tmp_path / "x.rcemb")])
        captured = capsys.readouterr()
        assert code == 1
        assert "error:" in captured.err

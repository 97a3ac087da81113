import json

import numpy as np
import pytest
from PIL import Image

from denc_exporter.cli import main as cli_main
from denc_exporter.export import ExportError, ExportJob, export_features

from deltaenc.data import load_dataset
from deltaenc.model import make_training_pairs


def make_toy_images(root, per_class=3, classes=("cats", "dogs"), black=False, size=32):
    rng = np.random.default_rng(0)
    for name in classes:
        folder = root / name
        folder.mkdir(parents=True)
        for i in range(per_class):
            if black:
                arr = np.zeros((size, size, 3), dtype=np.uint8)
            else:
                arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(folder / f"img{i}.png")


def toy_job(tmp_path, **kw):
    images = tmp_path / "images"
    if not images.exists():
        make_toy_images(images)
    defaults = dict(
        image_root=images,
        splits={"cats": "seen", "dogs": "unseen"},
        out_path=tmp_path / "features.dencfs",
        backbone="resnet18",
        batch_size=4,
        head_epochs=1,
    )
    defaults.update(kw)
    return ExportJob(**defaults)


class TestExport:
    def test_toy_folder_counts_and_format_contract(self, tmp_path):
        out = export_features(toy_job(tmp_path))
        ds = load_dataset(out)  # must pass the consumer's format validation
        assert ds.n == 6 and ds.d == 2048
        assert ds.class_names == ["cats", "dogs"]
        assert (ds.features >= 0).all()  # rectified final activation
        assert ds.seen.tolist() == [True, False]

    def test_split_integrity_downstream(self, tmp_path):
        # 2 seen classes so the consumer's pair sampler can run on the file
        images = tmp_path / "images"
        make_toy_images(images, classes=("a", "b", "c"))
        job = toy_job(tmp_path, image_root=images,
                      splits={"a": "seen", "b": "seen", "c": "unseen"})
        ds = load_dataset(export_features(job))
        unseen_rows = set(ds.class_indices(int(ds.unseen_class_ids[0])).tolist())
        stream = make_training_pairs(ds, seed=0)
        for _ in range(100):
            xi, yi, _ = next(stream)
            assert xi not in unseen_rows and yi not in unseen_rows

    def test_repeated_export_is_deterministic(self, tmp_path):
        a = export_features(toy_job(tmp_path, out_path=tmp_path / "a.dencfs"))
        b = export_features(toy_job(tmp_path, out_path=tmp_path / "b.dencfs"))
        assert a.read_bytes() == b.read_bytes()

    def test_all_black_images_give_identical_rows(self, tmp_path):
        images = tmp_path / "black"
        make_toy_images(images, black=True)
        ds = load_dataset(export_features(toy_job(tmp_path, image_root=images)))
        rows = ds.features
        assert np.array_equal(rows, np.tile(rows[0], (rows.shape[0], 1)))

    def test_manifest_records_provenance(self, tmp_path):
        out = export_features(toy_job(tmp_path))
        raw = out.read_bytes()
        import struct

        (mlen,) = struct.unpack_from("<Q", raw, 8)
        manifest = json.loads(raw[16: 16 + mlen])
        assert manifest["exporter"]["backbone"] == "resnet18"
        assert manifest["exporter"]["weights"] == "random-init:0"
        assert manifest["exporter"]["head"] == "fc2048-relu-fc2048-relu"


class TestErrors:
    def test_unreadable_image_abort(self, tmp_path):
        job = toy_job(tmp_path)
        (tmp_path / "images" / "cats" / "broken.png").write_bytes(b"not a png")
        with pytest.raises(ExportError, match="unreadable"):
            export_features(job)

    def test_unreadable_image_skip(self, tmp_path):
        job = toy_job(tmp_path, on_error="skip")
        (tmp_path / "images" / "cats" / "broken.png").write_bytes(b"not a png")
        ds = load_dataset(export_features(job))
        assert ds.n == 6  # the broken file is dropped, the rest survive

    def test_empty_class_folder(self, tmp_path):
        job = toy_job(tmp_path)
        (tmp_path / "images" / "empty_class").mkdir()
        job.splits = dict(job.splits, empty_class="seen")
        with pytest.raises(ExportError, match="no images"):
            export_features(job)

    def test_missing_split_tag(self, tmp_path):
        job = toy_job(tmp_path, splits={"cats": "seen"})
        with pytest.raises(ExportError, match="dogs"):
            export_features(job)

    def test_bad_split_value(self, tmp_path):
        with pytest.raises(ExportError, match="seen"):
            toy_job(tmp_path, splits={"cats": "seen", "dogs": "sometimes"})

    def test_unknown_backbone(self, tmp_path):
        with pytest.raises(ExportError, match="backbone"):
            toy_job(tmp_path, backbone="alexnet")


class TestCli:
    def test_export_roundtrip(self, tmp_path):
        images = tmp_path / "images"
        make_toy_images(images)
        splits = tmp_path / "splits.json"
        splits.write_text(json.dumps({"cats": "seen", "dogs": "unseen"}))
        out = tmp_path / "out.dencfs"
        rc = cli_main(["export", "--images", str(images), "--splits", str(splits),
                       "--backbone", "resnet18", "--out", str(out),
                       "--head-epochs", "0", "--batch-size", "4"])
        assert rc == 0
        assert load_dataset(out).n == 6

    def test_missing_required_flag_exits_2(self):
        assert cli_main(["export", "--images", "x"]) == 2

    def test_missing_splits_file_exits_3(self, tmp_path):
        images = tmp_path / "images"
        make_toy_images(images)
        assert cli_main(["export", "--images", str(images),
                         "--splits", str(tmp_path / "none.json"),
                         "--out", str(tmp_path / "o.dencfs")]) == 3

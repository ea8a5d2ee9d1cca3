"""Dataset layout, synthetic generation, mIoU and multi-scale inference."""

import numpy as np
import pytest
import torch

from weakseg.backbone import BackboneConfig, make_synthetic_backbone
from weakseg.datakit import (confusion_matrix, load_dataset, load_image,
                             load_mask, make_synthetic_dataset, miou,
                             multi_scale_infer, save_index_png,
                             write_palette_json)
from weakseg.decoder import Decoder
from weakseg.errors import DataError


def dataset_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestSyntheticDataset:
    def test_layout_and_labels_agree(self, tmp_path):
        manifest = make_synthetic_dataset(tmp_path / "d", seed=0, count=5,
                                          grid=(4, 4), num_classes=3, cell=4)
        assert len(manifest) == 5
        assert manifest.class_names == ["object00", "object01", "object02"]
        for record in manifest.records:
            mask = load_mask(record.mask_path).numpy()
            present = {int(v) - 1 for v in np.unique(mask) if v > 0}
            assert present == set(record.labels)
            assert len(record.labels) >= 1
            image = load_image(record.image_path)
            assert image.shape == (3, 16, 16)

    def test_byte_determinism(self, tmp_path):
        make_synthetic_dataset(tmp_path / "a", seed=3, count=4, val_count=2)
        make_synthetic_dataset(tmp_path / "b", seed=3, count=4, val_count=2)
        assert dataset_bytes(tmp_path / "a") == dataset_bytes(tmp_path / "b")

    def test_seed_changes_content(self, tmp_path):
        make_synthetic_dataset(tmp_path / "a", seed=3, count=4)
        make_synthetic_dataset(tmp_path / "b", seed=4, count=4)
        assert dataset_bytes(tmp_path / "a") != dataset_bytes(tmp_path / "b")

    def test_val_split_materialized(self, tmp_path):
        make_synthetic_dataset(tmp_path / "d", seed=1, count=3, val_count=2)
        val = load_dataset(tmp_path / "d", "val", mode="full")
        assert len(val) == 2
        assert all(r.mask_path is not None for r in val.records)

    def test_min_rect_bounds(self, tmp_path):
        with pytest.raises(ValueError):
            make_synthetic_dataset(tmp_path / "d", seed=0, count=1,
                                   grid=(4, 4), min_rect=3)


class TestLoadDataset:
    def test_missing_root(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "missing", "train")

    def test_missing_split(self, tmp_path):
        make_synthetic_dataset(tmp_path / "d", seed=0, count=2)
        with pytest.raises(DataError):
            load_dataset(tmp_path / "d", "test")

    def test_missing_image_file_names_id(self, tmp_path):
        root = tmp_path / "d"
        make_synthetic_dataset(root, seed=0, count=2)
        (root / "images" / "train_0001.png").unlink()
        with pytest.raises(DataError, match="train_0001"):
            load_dataset(root, "train")

    def test_unknown_class_name_rejected(self, tmp_path):
        root = tmp_path / "d"
        make_synthetic_dataset(root, seed=0, count=2)
        labels = (root / "image_labels.txt").read_text()
        (root / "image_labels.txt").write_text(
            labels.replace("object00", "objectXX", 1))
        with pytest.raises(DataError, match="objectXX"):
            load_dataset(root, "train")

    def test_weak_mode_requires_labels(self, tmp_path):
        root = tmp_path / "d"
        make_synthetic_dataset(root, seed=0, count=2)
        lines = (root / "image_labels.txt").read_text().splitlines()
        (root / "image_labels.txt").write_text("\n".join(lines[1:]) + "\n")
        with pytest.raises(DataError, match="train_0000"):
            load_dataset(root, "train", mode="weak")

    def test_full_mode_requires_masks(self, tmp_path):
        root = tmp_path / "d"
        make_synthetic_dataset(root, seed=0, count=2)
        (root / "masks" / "train_0000.png").unlink()
        with pytest.raises(DataError, match="train_0000"):
            load_dataset(root, "train", mode="full")
        # weak mode tolerates the missing mask
        manifest = load_dataset(root, "train", mode="weak")
        assert manifest.records[0].mask_path is None

    def test_default_class_list_is_voc(self, tmp_path):
        root = tmp_path / "d"
        make_synthetic_dataset(root, seed=0, count=2)
        (root / "classes.txt").unlink()
        labels = (root / "image_labels.txt").read_text()
        labels = labels.replace("object00", "cat").replace("object01", "dog")
        (root / "image_labels.txt").write_text(labels)
        manifest = load_dataset(root, "train")
        assert manifest.num_classes == 21


class TestIndexPng:
    def test_round_trip(self, tmp_path):
        arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "m.png"
        save_index_png(arr, path)
        assert np.array_equal(load_mask(path).numpy(), arr)

    def test_palette_json(self, tmp_path):
        import json
        path = tmp_path / "palette.json"
        write_palette_json(path, ["cat", "dog"])
        table = json.loads(path.read_text())
        assert table["0"]["name"] == "__background__"
        assert table["2"]["name"] == "dog"
        assert len(table["1"]["rgb"]) == 3


class TestConfusionAndMiou:
    def test_confusion_matches_loop(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 4, size=(6, 6))
        gt = rng.integers(0, 4, size=(6, 6))
        conf = confusion_matrix(pred, gt, 4)
        manual = np.zeros((4, 4), dtype=np.int64)
        for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
            manual[g, p] += 1
        assert np.array_equal(conf, manual)
        assert conf.sum() == 36

    def test_confusion_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.array([5]), np.array([0]), 4)
        with pytest.raises(ValueError):
            confusion_matrix(np.array([0, 1]), np.array([0]), 4)

    def test_perfect_prediction_scores_one(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, size=(8, 8))
        per_class, mean = miou(gt, gt, 3)
        assert mean == 1.0

    def test_hand_computed_example(self):
        gt = np.array([[0, 0, 1, 1]])
        pred = np.array([[0, 1, 1, 1]])
        per_class, mean = miou(pred, gt, 3)
        # class 0: tp 1, union 2; class 1: tp 2, union 3; class 2 absent
        assert abs(per_class[0] - 0.5) < 1e-12
        assert abs(per_class[1] - 2 / 3) < 1e-12
        assert np.isnan(per_class[2])
        assert abs(mean - (0.5 + 2 / 3) / 2) < 1e-12

    def test_absent_class_excluded_from_mean(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        pred = np.zeros((4, 4), dtype=np.int64)
        per_class, mean = miou(pred, gt, 5)
        assert mean == 1.0
        assert np.isnan(per_class[1:]).all()

    def test_list_accumulation(self):
        gt1, gt2 = np.array([[0, 1]]), np.array([[1, 1]])
        pred1, pred2 = np.array([[0, 0]]), np.array([[1, 1]])
        per_class, mean = miou([pred1, pred2], [gt1, gt2], 2)
        # class 0: tp 1, union 2; class 1: tp 2, union 3
        assert abs(per_class[0] - 0.5) < 1e-12
        assert abs(per_class[1] - 2 / 3) < 1e-12


class TestMultiScaleInfer:
    def setup_method(self):
        self.config = BackboneConfig(num_blocks=2, token_dim=16, patch_size=4,
                                     grid_h=4, grid_w=4, num_heads=2, text_dim=8)
        self.backbone = make_synthetic_backbone(self.config, seed=0)
        self.decoder = Decoder(num_blocks=2, token_dim=16, num_classes=3,
                               width=8, depth=1, num_heads=2, seed=0)

    def test_probability_output(self):
        gen = torch.Generator().manual_seed(0)
        pixels = torch.rand(1, 3, 16, 16, generator=gen)
        probs = multi_scale_infer(self.backbone, self.decoder, pixels, (0.75, 1.0))
        assert probs.shape == (1, 3, 16, 16)
        np.testing.assert_allclose(probs.sum(dim=1).numpy(), 1.0, atol=1e-5)
        assert bool((probs >= 0).all())

    def test_single_scale_equals_repeated_scale(self):
        gen = torch.Generator().manual_seed(1)
        pixels = torch.rand(1, 3, 16, 16, generator=gen)
        once = multi_scale_infer(self.backbone, self.decoder, pixels, (1.0,))
        thrice = multi_scale_infer(self.backbone, self.decoder, pixels, (1.0, 1.0, 1.0))
        assert torch.allclose(once, thrice, atol=1e-6)

    def test_empty_scales_rejected(self):
        with pytest.raises(ValueError):
            multi_scale_infer(self.backbone, self.decoder,
                              torch.rand(1, 3, 16, 16), ())

    def test_scaled_sizes_snap_to_patch_multiples(self):
        gen = torch.Generator().manual_seed(2)
        pixels = torch.rand(1, 3, 16, 16, generator=gen)
        probs = multi_scale_infer(self.backbone, self.decoder, pixels, (0.3, 1.3))
        assert probs.shape == (1, 3, 16, 16)

"""Synthetic corpus and dataset plumbing.

The separability tests are the load-bearing ones: a renderer whose identities
or modalities are not trivially distinguishable would silence every retrieval
metric downstream without failing anything else.
"""

import json
import os

import numpy as np
import pytest

from flow2flow.data import (MODALITIES, Sample, SynthSpec, batch_tensor,
                            from_normalized, load_dataset, quantize,
                            render_dataset, split_by_modality, to_normalized,
                            write_dataset)
from flow2flow.errors import ConfigError, DataError


def small_spec(**kw):
    base = dict(identities=6, images_per_id=4, height=24, width=12, seed=0)
    base.update(kw)
    return SynthSpec(**base)


class TestRenderer:
    def test_counts_and_shapes(self):
        ds = render_dataset(small_spec())
        assert len(ds) == 6 * 4 * 2
        by_mod = split_by_modality(ds)
        assert len(by_mod["visible"]) == len(by_mod["infrared"]) == 24
        for s in ds:
            assert s.image.shape == (3, 24, 12)
            assert s.image.min() >= 0.0 and s.image.max() <= 255.0
            assert not s.generated

    def test_determinism(self):
        a = render_dataset(small_spec(seed=9))
        b = render_dataset(small_spec(seed=9))
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert (sa.identity, sa.modality) == (sb.identity, sb.modality)

    def test_seed_changes_pixels(self):
        a = render_dataset(small_spec(seed=1))
        b = render_dataset(small_spec(seed=2))
        assert not np.array_equal(a[0].image, b[0].image)

    def test_infrared_channels_equal(self):
        for s in render_dataset(small_spec()):
            if s.modality == "infrared":
                assert np.array_equal(s.image[0], s.image[1])
                assert np.array_equal(s.image[0], s.image[2])

    def test_visible_channels_differ(self):
        vis = split_by_modality(render_dataset(small_spec()))["visible"]
        spread = np.mean([s.image.std(axis=0).mean() for s in vis])
        assert spread > 5.0

    @staticmethod
    def _centroid_accuracy(spec: SynthSpec, modality: str) -> float:
        # Train centroids on the first half per identity, classify the rest.
        ds = render_dataset(spec)
        subset = split_by_modality(ds)[modality]
        half = spec.images_per_id // 2
        feats = {k: [s.image.ravel() for s in subset if s.identity == k]
                 for k in range(spec.identities)}
        centroids = {k: np.mean(v[:half], axis=0) for k, v in feats.items()}
        total = hits = 0
        for k, v in feats.items():
            for x in v[half:]:
                pred = min(centroids, key=lambda c: np.linalg.norm(x - centroids[c]))
                hits += pred == k
                total += 1
        return hits / total

    @pytest.mark.parametrize("modality", MODALITIES)
    def test_identity_separability_default_spec(self, modality):
        # The default corpus must clear 90% or retrieval metrics downstream
        # measure nothing.
        assert self._centroid_accuracy(SynthSpec(), modality) > 0.9

    @pytest.mark.parametrize("modality", MODALITIES)
    def test_identity_separability_larger_draw(self, modality):
        spec = SynthSpec(identities=8, images_per_id=6, seed=4)
        assert self._centroid_accuracy(spec, modality) > 0.9

    def test_modality_separability_is_total(self):
        # Saturation proxy: mean absolute channel deviation. Infrared is zero
        # by construction; visible sprites are saturated colors.
        ds = render_dataset(small_spec(identities=8, images_per_id=5, seed=2))
        vis = [s.image.std(axis=0).mean() for s in ds if s.modality == "visible"]
        ir = [s.image.std(axis=0).mean() for s in ds if s.modality == "infrared"]
        # equal channels still leave ulp-scale std through the mean
        assert max(ir) < 1e-9
        assert min(vis) > 1e6 * max(ir)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            render_dataset(small_spec(identities=1))
        with pytest.raises(ConfigError):
            render_dataset(small_spec(images_per_id=1))
        with pytest.raises(ConfigError):
            render_dataset(small_spec(height=23))
        with pytest.raises(ConfigError):
            render_dataset(small_spec(width=4))


class TestDiskRoundtrip:
    def test_write_then_load_preserves_quantized_pixels(self, tmp_path):
        ds = render_dataset(small_spec())
        write_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back) == len(ds)
        bykey = {(s.modality, s.identity, s.path): s for s in back}
        for s in ds:
            loaded = bykey[(s.modality, s.identity, s.path)]
            want = quantize(s.image).transpose(2, 0, 1).astype(np.float64)
            assert np.array_equal(loaded.image, want)

    def test_layout_on_disk(self, tmp_path):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))
        write_dataset(ds, tmp_path)
        assert (tmp_path / "visible" / "0" / "000.png").is_file()
        assert (tmp_path / "infrared" / "1" / "001.png").is_file()
        with open(tmp_path / "manifest.json") as f:
            doc = json.load(f)
        assert len(doc["samples"]) == 8
        assert {"path", "identity", "modality", "generated"} <= set(doc["samples"][0])

    def test_refuses_overwrite_without_flag(self, tmp_path):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))
        write_dataset(ds, tmp_path)
        with pytest.raises(ConfigError, match="exists"):
            write_dataset(ds, tmp_path)
        write_dataset(ds, tmp_path, overwrite=True)

    def test_ppm_format(self, tmp_path):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))
        write_dataset(ds, tmp_path, fmt="ppm")
        assert (tmp_path / "visible" / "0" / "000.ppm").is_file()
        assert len(load_dataset(tmp_path)) == 8

    def test_directory_scan_without_manifest(self, tmp_path):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))
        write_dataset(ds, tmp_path)
        os.remove(tmp_path / "manifest.json")
        back = load_dataset(tmp_path)
        assert len(back) == 8
        assert {s.modality for s in back} == set(MODALITIES)
        assert {s.identity for s in back} == {0, 1}

    def test_loads_via_manifest_path_directly(self, tmp_path):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))
        manifest = write_dataset(ds, tmp_path)
        assert len(load_dataset(manifest)) == 8

    def test_resize_to_requested_extent(self, tmp_path):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))
        write_dataset(ds, tmp_path)
        back = load_dataset(tmp_path, extent=(12, 6))
        assert all(s.image.shape == (3, 12, 6) for s in back)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(DataError, match="no dataset"):
            load_dataset(tmp_path)

    def test_corrupt_manifest_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DataError, match="manifest"):
            load_dataset(tmp_path)

    def test_non_integer_identity_dir_rejected(self, tmp_path):
        bad = tmp_path / "visible" / "alice"
        bad.mkdir(parents=True)
        (bad / "x.png").write_bytes(b"")
        with pytest.raises(DataError, match="integer"):
            load_dataset(tmp_path)


class TestPixelScaling:
    def test_affine_endpoints(self):
        arr = to_normalized(np.array([[[0.0, 255.0]]]))
        assert arr[0, 0, 0] == pytest.approx(-0.9, abs=1e-12)
        assert arr[0, 0, 1] == pytest.approx(0.9, abs=1e-12)

    def test_roundtrip_without_noise_is_exact_after_rint(self):
        img = np.arange(256, dtype=np.float64).reshape(1, 16, 16).repeat(3, axis=0)
        back = from_normalized(to_normalized(img))
        assert np.array_equal(np.rint(back), img)

    def test_dequantization_noise_stays_inside_one_step(self):
        rng = np.random.default_rng(0)
        img = np.full((3, 10, 10), 100.0)
        arr = to_normalized(img, rng)
        base = to_normalized(img)
        step = 1.8 / 255.0
        assert np.all(arr >= base) and np.all(arr < base + step)
        assert arr.std() > 0

    def test_from_normalized_clips(self):
        out = from_normalized(np.array([-5.0, 5.0]))
        assert out[0] == 0.0 and out[1] == 255.0

    def test_quantize_rounds_half_to_even(self):
        img = np.array([0.5, 1.5, 2.5, 3.5]).reshape(1, 1, 4).repeat(3, axis=0)
        q = quantize(img)
        assert q[0, :, 0].tolist() == [0, 2, 2, 4]

    def test_quantize_layout(self):
        img = np.zeros((3, 4, 2))
        img[1, 0, 0] = 200.0
        q = quantize(img)
        assert q.shape == (4, 2, 3)
        assert q[0, 0, 1] == 200 and q[0, 0, 0] == 0

    def test_batch_tensor(self):
        ds = render_dataset(small_spec(identities=2, images_per_id=2))[:4]
        t, ids = batch_tensor(ds)
        assert t.data.shape == (4, 3, 24, 12)
        assert ids.tolist() == [s.identity for s in ds[:4]]
        assert t.data.min() >= -0.9 - 1e-12 and t.data.max() <= 0.9 + 1e-12

    def test_batch_tensor_rejects_empty(self):
        with pytest.raises(DataError, match="empty"):
            batch_tensor([])

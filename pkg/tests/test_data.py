import hashlib

import numpy as np
import pytest

from mscnn import data
from mscnn.data import (CodecProxyConfig, PatchGrid, YuvSequence, augment,
                        build_dataset, codec_proxy, denormalize, extract_patches,
                        normalize, read_yuv, reassemble, write_yuv)

import reference


def smooth_test_image(size=128, seed=0):
    """Deterministic natural-looking plane: smooth ramps + soft texture."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size]
    base = 96 + 48 * np.sin(x / 19.0) + 40 * np.cos(y / 23.0)
    noise = rng.standard_normal((size, size))
    k = np.ones(9) / 9
    for axis in (0, 1):
        noise = np.apply_along_axis(np.convolve, axis, noise, k, mode="same")
    img = base + 20 * noise
    img[size // 4 : size // 2, size // 4 : size // 2] += 35  # one flat block
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


class TestYuv:
    def test_roundtrip_byte_identical(self, tmp_path, rng):
        frames = [(rng.integers(0, 256, (16, 16)).astype(np.uint8),
                   rng.integers(0, 256, (8, 8)).astype(np.uint8),
                   rng.integers(0, 256, (8, 8)).astype(np.uint8)) for _ in range(3)]
        seq = YuvSequence(16, 16, frames)
        p = tmp_path / "clip.yuv"
        write_yuv(seq, p)
        back = read_yuv(p, 16, 16)
        for (a, b, c), (x, y, z) in zip(seq.frames, back.frames):
            assert a.tobytes() == x.tobytes()
            assert b.tobytes() == y.tobytes()
            assert c.tobytes() == z.tobytes()

    def test_file_length(self, tmp_path):
        seq = YuvSequence(16, 16, [(np.zeros((16, 16), np.uint8),
                                    np.zeros((8, 8), np.uint8),
                                    np.zeros((8, 8), np.uint8))] * 2)
        p = tmp_path / "two.yuv"
        write_yuv(seq, p)
        assert p.stat().st_size == 768

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "bad.yuv"
        p.write_bytes(b"\0" * 767)
        with pytest.raises(ValueError):
            read_yuv(p, 16, 16)

    def test_odd_dimensions_rejected(self, tmp_path):
        p = tmp_path / "odd.yuv"
        p.write_bytes(b"\0" * 100)
        with pytest.raises(ValueError):
            read_yuv(p, 15, 16)


class TestPgm:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.integers(0, 256, (24, 31)).astype(np.uint8)
        p = tmp_path / "img.pgm"
        data.write_pgm(img, p)
        assert data.read_pgm(p).tobytes() == img.tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P6 2 2 255\n\0\0\0\0")
        with pytest.raises(ValueError):
            data.read_pgm(p)


class TestPatches:
    def test_single_patch(self):
        g = PatchGrid(128, 128, 128, 10)
        assert len(g.origins) == 1

    def test_overlapping_count(self):
        g = PatchGrid(138, 138, 128, 10)
        assert len(g.origins) == 4

    def test_clamped_final_origin(self):
        g = PatchGrid(139, 139, 128, 10)
        ys = sorted({y for y, _ in g.origins})
        assert ys == [0, 10, 11]

    def test_plane_smaller_than_patch_rejected(self):
        with pytest.raises(ValueError):
            PatchGrid(100, 128, 128, 10)

    def test_reassemble_is_exact_identity(self, rng):
        for dtype in (np.uint8, np.float32):
            plane = (rng.integers(0, 256, (70, 90)) if dtype == np.uint8
                     else rng.random((70, 90)) * 3 - 1).astype(dtype)
            g = PatchGrid(70, 90, 32, 13)
            back = reassemble(extract_patches(plane, g), g)
            assert back.dtype == plane.dtype
            np.testing.assert_array_equal(back, plane)


class TestAugment:
    def test_exactly_24_variants(self, rng):
        img = rng.integers(0, 256, (40, 48)).astype(np.uint8)
        variants = augment(img)
        assert len(variants) == 24
        tags = [t for _, t in variants]
        assert len(set(tags)) == 24
        # rotation-major, then scale, then flip
        assert tags[0] == (0, 1.0, False)
        assert tags[1] == (0, 1.0, True)
        assert tags[2] == (0, 0.75, False)
        assert tags[8] == (90, 1.0, False)

    def test_identity_variant_equals_input(self, rng):
        img = rng.integers(0, 256, (40, 48)).astype(np.uint8)
        variant, tag = augment(img)[0]
        assert tag == (0, 1.0, False)
        np.testing.assert_array_equal(variant, img)

    def test_rot180_is_involution(self, rng):
        img = rng.integers(0, 256, (40, 48)).astype(np.uint8)
        once = dict(((t, v) for v, t in augment(img)))[(180, 1.0, False)]
        twice = dict(((t, v) for v, t in augment(once)))[(180, 1.0, False)]
        np.testing.assert_array_equal(twice, img)

    def test_scaled_dims_even(self, rng):
        img = rng.integers(0, 256, (50, 54)).astype(np.uint8)
        for v, (rot, scale, flip) in augment(img):
            assert v.shape[0] % 2 == 0 and v.shape[1] % 2 == 0


class TestCodecProxy:
    def test_qstep_formula(self):
        assert CodecProxyConfig(4).qstep == pytest.approx(1.0)
        assert CodecProxyConfig(22).qstep == pytest.approx(8.0)
        assert CodecProxyConfig(37).qstep == pytest.approx(2 ** 5.5)

    def test_unit_step_error_at_most_one(self, any_backend):
        img = smooth_test_image()
        out = codec_proxy(img, CodecProxyConfig(4))
        err = np.abs(out.astype(int) - img.astype(int)).max()
        assert err <= 1

    def test_huge_step_flattens_blocks(self, any_backend):
        img = smooth_test_image()
        out = codec_proxy(img, CodecProxyConfig(80))  # qstep >> any AC magnitude
        blocks = out.reshape(16, 8, 16, 8).transpose(0, 2, 1, 3)
        for by in range(16):
            for bx in range(16):
                assert np.ptp(blocks[by, bx]) <= 1  # flat up to pixel rounding

    @pytest.mark.parametrize("qp", [22, 27, 32, 37])
    def test_idempotent(self, any_backend, qp):
        img = smooth_test_image()
        once = codec_proxy(img, CodecProxyConfig(qp))
        twice = codec_proxy(once, CodecProxyConfig(qp))
        np.testing.assert_array_equal(once, twice)

    def test_psnr_monotone_in_qp(self, any_backend):
        from mscnn.metrics import psnr
        img = smooth_test_image(256, seed=3)
        values = [psnr(img, codec_proxy(img, CodecProxyConfig(qp)))
                  for qp in (22, 27, 32, 37)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_quantizer_idempotent_exactly(self):
        rng = np.random.default_rng(0)
        coef = rng.standard_normal(1000) * 300
        q = CodecProxyConfig(27).qstep
        once = data.quantize(coef, q)
        np.testing.assert_array_equal(once, data.quantize(once, q))

    def test_nonmultiple_of_8_dims(self, any_backend):
        img = smooth_test_image()[:59, :61]
        out = codec_proxy(img, CodecProxyConfig(32))
        assert out.shape == (59, 61)

    def test_dct_basis_matches_cosine_definition(self, rng):
        block = rng.standard_normal((8, 8)) * 50
        via_matrix = data.DCT_BASIS @ block @ data.DCT_BASIS.T
        np.testing.assert_allclose(via_matrix, reference.dct2_block_loop(block),
                                   atol=1e-10)


class TestNormalize:
    def test_endpoints(self):
        assert normalize(np.array([[255]], np.uint8))[0, 0] == pytest.approx(1.0)
        assert normalize(np.array([[0]], np.uint8))[0, 0] == 0.0

    def test_roundtrip_all_byte_values(self):
        p = np.arange(256, dtype=np.uint8).reshape(16, 16)
        np.testing.assert_array_equal(denormalize(normalize(p)), p)

    def test_out_of_range_clamped(self):
        assert denormalize(np.array([1.2]))[0] == 255
        assert denormalize(np.array([-0.5]))[0] == 0


class TestBuildDataset:
    def _write_sources(self, tmp_path, count=1, size=128, seed=0):
        src = tmp_path / "src"
        src.mkdir(exist_ok=True)
        for i in range(count):
            data.write_pgm(smooth_test_image(size, seed + i), src / f"img{i:02d}.pgm")
        return src

    def test_single_image_single_patch(self, any_backend, tmp_path):
        src = self._write_sources(tmp_path)
        counts = build_dataset(src, [37], tmp_path / "ds", 128, 128)
        assert counts == {37: 1}
        ds = data.PatchDataset(tmp_path / "ds", 37)
        assert ds.count == 1
        cur, ref, gt = ds.load_batch(np.array([0]))
        assert cur.shape == (1, 1, 128, 128)
        np.testing.assert_array_equal(cur, ref)  # still image: self-pair

    def test_manifest_provenance(self, any_backend, tmp_path):
        src = self._write_sources(tmp_path)
        build_dataset(src, [37], tmp_path / "ds", 64, 64)
        ds = data.PatchDataset(tmp_path / "ds", 37)
        img = data.read_pgm(src / "img00.pgm")
        lines = (tmp_path / "ds" / "qp37" / "manifest.tsv").read_text().splitlines()
        assert len(lines) == ds.count + 1  # header
        pid, name, frame, oy, ox, qp, tag = lines[1].split("\t")
        np.testing.assert_array_equal(
            ds.truth[int(pid)], img[int(oy) : int(oy) + 64, int(ox) : int(ox) + 64])

    def test_rebuild_is_deterministic(self, any_backend, tmp_path):
        src = self._write_sources(tmp_path, count=2)
        digests = []
        for d in ("a", "b"):
            build_dataset(src, [32], tmp_path / d, 64, 32)
            h = hashlib.sha256()
            for f in ("current.tiles", "reference.tiles", "truth.tiles", "manifest.tsv"):
                h.update((tmp_path / d / "qp32" / f).read_bytes())
            digests.append(h.hexdigest())
        assert digests[0] == digests[1]

    def test_augmentation_multiplies_sources(self, any_backend, tmp_path):
        # patch small enough that even the 0.25-scale variants contribute
        src = self._write_sources(tmp_path, size=64)
        build_dataset(src, [37], tmp_path / "ds", 16, 16, augment_enabled=True)
        manifest = (tmp_path / "ds" / "qp37" / "manifest.tsv").read_text().splitlines()[1:]
        tags = {line.split("\t")[-1] for line in manifest}
        assert len(tags) == 24  # every variant large enough here contributes

    def test_empty_sources_rejected(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        with pytest.raises(ValueError):
            build_dataset(empty, [37], tmp_path / "ds", 64, 64)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fafnet.data import DatasetConfig, Image, bicubic_up, degrade
from fafnet.metrics import (
    MetricsReport,
    aggregate,
    colorize,
    diagnostics,
    ergas,
    error_map,
    format_reports,
    hc_conj,
    hc_mul,
    q2n,
    qnr_from,
    qnr_suite,
    reduced_report,
    reports_csv,
    sam,
    scc,
    spectrum_map,
    uiqi,
    write_pgm,
    write_ppm,
)


def hamilton(p, q):
    a1, b1, c1, d1 = p
    a2, b2, c2, d2 = q
    return (
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    )


def q4_oracle(ref, fused):
    """Quaternion quality index of one window, written with plain Python arithmetic."""
    zs = [tuple(float(v) for v in px) for px in ref.reshape(-1, 4)]
    hs = [tuple(float(v) for v in px) for px in fused.reshape(-1, 4)]
    n = len(zs)
    mz = [sum(z[k] for z in zs) / n for k in range(4)]
    mh = [sum(h[k] for h in hs) / n for k in range(4)]
    dz = [[z[k] - mz[k] for k in range(4)] for z in zs]
    dh = [[h[k] - mh[k] for k in range(4)] for h in hs]
    vz = sum(sum(v * v for v in d) for d in dz) / n
    vh = sum(sum(v * v for v in d) for d in dh) / n
    cov = [0.0] * 4
    for a, b in zip(dz, dh):
        prod = hamilton(a, (b[0], -b[1], -b[2], -b[3]))
        cov = [c + p / n for c, p in zip(cov, prod)]
    ncov = math.sqrt(sum(c * c for c in cov))
    nz, nh = math.sqrt(sum(v * v for v in mz)), math.sqrt(sum(v * v for v in mh))
    return ncov / math.sqrt(vz * vh) * (2 * math.sqrt(vz * vh) / (vz + vh)) * (2 * nz * nh / (nz**2 + nh**2))


class TestUiqi:
    def test_identical(self):
        a = np.random.default_rng(0).normal(size=(40, 40)) + 3
        assert uiqi(a, a) == pytest.approx(1.0)

    def test_anticorrelated_zero_mean(self):
        a = np.tile([1.0, -1.0], (8, 4))
        assert uiqi(a, -a, block=None) == pytest.approx(-1.0)

    def test_hand_example(self):
        a, b = np.array([1.0, 2, 3, 4]), np.array([2.0, 4, 6, 8])
        ma, mb = 2.5, 5.0
        va, vb, cov = 1.25, 5.0, 2.5
        want = 4 * cov * ma * mb / ((va + vb) * (ma**2 + mb**2))
        assert uiqi(a, b, block=None) == pytest.approx(want, rel=1e-14)
        assert want == pytest.approx(0.64)

    def test_degenerate_blocks(self):
        flat = np.full((4, 4), 2.0)
        assert uiqi(flat, flat, block=None) == 1.0
        assert uiqi(flat, flat + 1, block=None) == 0.0
        assert uiqi(flat, np.random.default_rng(0).normal(size=(4, 4)), block=None) == 0.0

    def test_tiles_cover_odd_sizes(self):
        a = np.random.default_rng(1).normal(size=(40, 50)) + 5
        assert uiqi(a, a, block=32) == pytest.approx(1.0)


class TestSam:
    def test_identity(self):
        x = np.random.default_rng(0).uniform(1, 2, (4, 4, 3))
        assert sam(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal(self):
        ref = np.zeros((3, 3, 2))
        ref[..., 0] = 1
        fused = np.zeros((3, 3, 2))
        fused[..., 1] = 1
        assert sam(ref, fused) == 90.0

    def test_45(self):
        ref = np.ones((2, 2, 2))
        fused = np.zeros((2, 2, 2))
        fused[..., 0] = 1
        assert abs(sam(ref, fused) - 45.0) < 1e-9

    def test_zero_pixels_skipped(self):
        ref = np.ones((2, 2, 2))
        fused = ref.copy()
        fused[0, 0] = 0
        with pytest.warns(RuntimeWarning):
            assert sam(ref, fused) == pytest.approx(0.0, abs=1e-6)
        with pytest.raises(ValueError):
            sam(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**16))
    def test_per_pixel_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        ref, fused = rng.uniform(0.1, 1, (2, 5, 5, 4))
        scale = rng.uniform(0.5, 3, (5, 5, 1))
        assert sam(ref * scale, fused) == pytest.approx(sam(ref, fused), abs=1e-6)
        assert sam(ref * 7, fused * 7) == pytest.approx(sam(ref, fused), abs=1e-6)


class TestErgas:
    def test_identity(self):
        x = np.random.default_rng(0).uniform(1, 2, (4, 4, 3))
        assert ergas(x, x) == 0.0

    def test_hand_case(self):
        ref = np.full((2, 2, 1), 100.0)
        fused = ref + np.array([1.0, -1.0, 1.0, -1.0]).reshape(2, 2, 1)
        assert abs(ergas(ref, fused, 4) - 0.25) < 1e-12

    def test_scale_invariant(self):
        rng = np.random.default_rng(1)
        ref, fused = rng.uniform(1, 5, (2, 6, 6, 4))
        assert ergas(3 * ref, 3 * fused) == pytest.approx(ergas(ref, fused), rel=1e-12)

    def test_zero_mean_band_named(self):
        ref = np.ones((2, 2, 3))
        ref[..., 1] = 0
        with pytest.raises(ValueError, match="band 1"):
            ergas(ref, ref)


class TestScc:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(16, 16, 2))
        assert scc(x, x) == pytest.approx(1.0)

    def test_offset_removed(self):
        ramp = np.add.outer(np.arange(16.0) ** 2, np.arange(16.0))[:, :, None]
        assert scc(ramp, ramp + 50) == pytest.approx(1.0)

    def test_constant_fused_skipped(self):
        x = np.random.default_rng(1).normal(size=(8, 8, 2))
        with pytest.warns(RuntimeWarning), pytest.raises(ValueError):
            scc(x, np.ones_like(x))


class TestQ2n:
    def test_hypercomplex_is_hamilton(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            p, q = rng.normal(size=(2, 4))
            np.testing.assert_allclose(hc_mul(p, q), hamilton(p, q), atol=1e-14)
        x = rng.normal(size=8)
        norm = hc_mul(x, hc_conj(x))
        np.testing.assert_allclose(norm, [x @ x] + [0] * 7, atol=1e-12)

    def test_identity_and_constant(self):
        x = np.random.default_rng(0).uniform(1, 2, (32, 32, 4))
        assert q2n(x, x) == pytest.approx(1.0)
        flat = np.ones((32, 32, 4)) * np.array([1.0, 2.0, 3.0, 4.0])
        assert q2n(flat, flat) == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            ref = rng.uniform(0.2, 1.0, (32, 32, 4))
            fused = ref + rng.normal(0, rng.uniform(0.01, 0.3), ref.shape)
            assert abs(q2n(ref, fused) - q4_oracle(ref, fused)) <= 1e-6

    def test_eight_band_identity(self):
        x = np.random.default_rng(1).uniform(1, 2, (32, 32, 8))
        assert q2n(x, x) == pytest.approx(1.0)

    def test_band_count(self):
        with pytest.raises(ValueError):
            q2n(np.ones((32, 32, 3)), np.ones((32, 32, 3)))


class TestQnr:
    @pytest.mark.parametrize("dl, ds, published", [(0.0168, 0.0243, 0.9594), (0.0123, 0.0185, 0.9695)])
    def test_published_rows(self, dl, ds, published):
        assert abs(qnr_from(dl, ds) - published) < 1e-4

    def test_consistent_fusion_is_ideal(self):
        rng = np.random.default_rng(0)
        base = rng.uniform(100, 1000, (8, 8, 1))
        ms = np.concatenate([base, 0.5 * base, 2 * base, base + 10], axis=2)
        fused = bicubic_up(Image(ms), 4).data
        pan = fused.mean(axis=2, keepdims=True)
        lr_pan = degrade(Image(pan), DatasetConfig()).data
        dl, ds, q = qnr_suite(fused, ms, pan, lr_pan, block=8)
        assert dl < 0.05 and ds < 0.1 and q > 0.85

    def test_exact_self_consistency(self):
        rng = np.random.default_rng(1)
        ms = rng.uniform(1, 2, (16, 16, 4))
        big = np.kron(ms, np.ones((2, 2, 1)))
        # replicated pixels keep every inter-band UIQI, so D_lambda vanishes
        dl, _, _ = qnr_suite(big, ms, big[:, :, :1], ms[:, :, :1], block=32)
        assert dl == pytest.approx(0.0, abs=1e-12)

    def test_scale_mismatch(self):
        with pytest.raises(ValueError):
            qnr_suite(np.ones((8, 8, 4)), np.ones((4, 4, 4)), np.ones((16, 16, 1)), np.ones((4, 4, 1)))


class TestReports:
    def test_reference_as_fused_is_ideal(self):
        x = np.random.default_rng(0).uniform(100, 2000, (32, 32, 4))
        rep = reduced_report(x, x, name="oracle")
        assert rep.sam_deg == pytest.approx(0.0, abs=1e-5)
        assert rep.ergas == 0.0
        assert rep.q2n == pytest.approx(1.0) and rep.scc == pytest.approx(1.0)

    def test_aggregate_two_samples(self):
        reps = [MetricsReport("a", sam_deg=1.0, ergas=2.0), MetricsReport("b", sam_deg=3.0, ergas=5.0)]
        agg = aggregate(reps)
        assert agg["sam_deg"] == (2.0, 1.0)
        assert agg["ergas"][1] == pytest.approx(math.sqrt(((2 - 3.5) ** 2 + (5 - 3.5) ** 2) / 2))
        assert "q2n" not in agg
        text = format_reports(reps)
        assert text.count("\n") == 3 and "mean:" in text
        csv_text = reports_csv(reps)
        assert csv_text.splitlines()[0].startswith("name,sam_deg")
        assert len(csv_text.splitlines()) == 5


class TestDiagnostics:
    def test_aem_zero(self):
        x = np.random.default_rng(0).uniform(0, 10, (8, 8, 3))
        assert not error_map(x, x).any()
        _, rgb = diagnostics(x, x)
        assert not rgb.any()

    def test_constant_spectrum_dc_peak(self):
        spec = spectrum_map(np.full((16, 16, 2), 5.0))
        assert spec[8, 8] == 255
        assert (spec == 255).sum() == 1 and spec.sum() == 255

    def test_horizontal_sinusoid_peaks(self):
        x = np.sin(2 * np.pi * 3 * np.arange(32) / 32)[None, :].repeat(32, axis=0)[:, :, None] + 2
        spec = spectrum_map(x).astype(int)
        row = spec[16]
        peaks = sorted(np.argsort(row)[-3:])
        assert peaks == [13, 16, 19]
        assert row[13] == row[19]

    def test_files(self, tmp_path):
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_pgm(tmp_path / "a.pgm", gray)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n4 3\n255\n") and raw.endswith(gray.tobytes())
        rgb = colorize(np.linspace(0, 1, 12).reshape(3, 4))
        write_ppm(tmp_path / "b.ppm", rgb)
        assert (tmp_path / "b.ppm").read_bytes().startswith(b"P6\n4 3\n255\n")
        assert rgb[0, 0].tolist() == [0, 0, 0] and rgb[-1, -1].tolist() == [255, 255, 255]

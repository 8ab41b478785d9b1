import numpy as np
import pytest

from curvreg import PolarConfig, PolarImage
from curvreg.features import (DetectorConfig, FeatureMap, binarize_guidewire,
                              detect_heuristic, detect_oracle,
                              longitudinal_profile, transport_labels)
from curvreg.registration import TransformParams


def polar_image(data, dr=0.07, dz=0.3):
    n_r, n_theta, n_z = data.shape
    cfg = PolarConfig(n_r=n_r, dr=dr, n_theta=n_theta, dz=dz)
    return PolarImage(data=data, config=cfg, z_positions=np.arange(n_z) * dz)


class TestOracle:
    def test_zero_flip_preserves_binarization(self, rng):
        labels = (rng.random((2, 12, 20)) > 0.8).astype(float)
        fm = detect_oracle(labels, ("B", "C"), DetectorConfig(label_noise=0.0))
        assert np.array_equal(fm.probs > 0.5, labels > 0.5)

    def test_all_zero_labels_stay_low(self):
        fm = detect_oracle(np.zeros((2, 10, 10)), ("B", "C"), DetectorConfig())
        assert np.all(fm.probs < 0.5)

    def test_flip_rate_binomial(self):
        # >= 1e4 bins, flip probability 0.1: measured rate within +-0.02
        labels = np.zeros((1, 100, 120))
        cfg = DetectorConfig(label_noise=0.1, seed=5)
        fm = detect_oracle(labels, ("B",), cfg)
        flipped = np.mean(fm.probs > 0.5)
        assert abs(flipped - 0.1) < 0.02

    def test_deterministic_under_seed(self, rng):
        labels = (rng.random((3, 16, 30)) > 0.7).astype(float)
        cfg = DetectorConfig(label_noise=0.2, seed=11)
        a = detect_oracle(labels, ("G", "B", "C"), cfg)
        b = detect_oracle(labels, ("G", "B", "C"), cfg)
        assert np.array_equal(a.probs, b.probs)

    def test_values_in_unit_interval(self, rng):
        labels = (rng.random((2, 12, 14)) > 0.5).astype(float)
        fm = detect_oracle(labels, ("B", "C"), DetectorConfig(label_noise=0.3))
        assert fm.probs.min() >= 0.0 and fm.probs.max() <= 1.0


def tube_profile(n_r=64, dr=0.07, lumen=1.5, wall=0.8):
    r = (np.arange(n_r) + 0.5) * dr
    prof = np.where(r <= lumen, 1.0, np.where(r <= lumen + wall, 0.35, 0.1))
    return prof


class TestHeuristic:
    def make_tube_image(self, n_z=20):
        prof = tube_profile()
        data = np.repeat(np.repeat(prof[:, None], 48, 1)[:, :, None], n_z, 2)
        return polar_image(data)

    def test_constant_image_all_low(self):
        img = polar_image(np.full((64, 48, 10), 0.5))
        fm = detect_heuristic(img, "ivus", DetectorConfig())
        assert np.all(fm.probs < 0.5)

    def test_plain_tube_all_low(self):
        fm = detect_heuristic(self.make_tube_image(), "ivus", DetectorConfig())
        assert np.all(fm.probs < 0.5)

    def test_calcification_argmax_at_injected_bin(self):
        img = self.make_tube_image()
        r = (np.arange(64) + 0.5) * 0.07
        ring = (r > 1.35) & (r < 2.0)
        img.data[ring, 12, 10] += 1.2  # theta bin 12 = pi/2 at slice 10
        fm = detect_heuristic(img, "mpr", DetectorConfig())
        c = fm.probs[fm.class_index("C")]
        assert int(np.argmax(c[:, 10])) == 12
        assert c[12, 10] > 0.5

    def test_boost_monotone_in_intensity(self):
        cfg = DetectorConfig()
        img = self.make_tube_image()
        r = (np.arange(64) + 0.5) * 0.07
        ring = (r > 1.35) & (r < 2.0)
        prev = None
        for boost in (0.0, 0.4, 0.8, 1.2, 1.6):
            im2 = polar_image(img.data.copy())
            im2.data[ring, 5, 3] += boost
            prob = detect_heuristic(im2, "mpr", cfg).probs[1, 5, 3]
            if prev is not None:
                assert prob >= prev
            prev = prob

    def test_branch_run_excess_triggers_b(self):
        img = self.make_tube_image()
        r = (np.arange(64) + 0.5) * 0.07
        img.data[r <= 3.4, 7, 8:12] = 1.0  # lumen extended outward
        fm = detect_heuristic(img, "mpr", DetectorConfig())
        b = fm.probs[fm.class_index("B")]
        assert np.all(b[7, 8:12] > 0.5)
        assert b[20, 8:12].max() < 0.5

    def test_guidewire_wedge_detected(self):
        img = self.make_tube_image()
        edge = int(round(0.6 / 0.07))
        img.data[:edge, 30:34, :] = 1.8
        img.data[edge:, 30:34, :] = 0.0
        fm = detect_heuristic(img, "ivus", DetectorConfig())
        g = fm.probs[fm.class_index("G")]
        assert np.all(g[30:34] > 0.5)
        assert g[[0, 10, 20, 40]].max() < 0.5

    def test_mpr_has_no_guidewire_class(self):
        fm = detect_heuristic(self.make_tube_image(), "mpr", DetectorConfig())
        assert fm.classes == ("B", "C")

    def test_vjp_matches_directional_fd(self, rng):
        # directional derivative check at 50 random bins
        img = self.make_tube_image()
        img.data += rng.normal(0.0, 0.05, img.data.shape)
        cfg = DetectorConfig()
        fm, vjp = detect_heuristic(img, "ivus", cfg, with_jacobian=True)
        upstream = rng.normal(size=fm.probs.shape)
        grad = vjp(upstream)
        h = 1e-6
        picks = [(rng.integers(0, 64), rng.integers(0, 48), rng.integers(0, 20))
                 for _ in range(50)]
        for idx in picks:
            up = polar_image(img.data.copy())
            up.data[idx] += h
            dn = polar_image(img.data.copy())
            dn.data[idx] -= h
            fd = float(np.sum(upstream * (detect_heuristic(up, "ivus", cfg).probs
                                          - detect_heuristic(dn, "ivus", cfg).probs))) / (2 * h)
            assert np.isclose(grad[idx], fd, rtol=1e-3, atol=1e-9), idx

    def test_invalid_modality(self):
        with pytest.raises(ValueError):
            detect_heuristic(self.make_tube_image(), "xray", DetectorConfig())


class TestBinarizeAndProfile:
    def test_empty_and_full_masks(self):
        zeros = FeatureMap(probs=np.zeros((3, 8, 5)), classes=("G", "B", "C"))
        ones = FeatureMap(probs=np.ones((3, 8, 5)), classes=("G", "B", "C"))
        assert not binarize_guidewire(zeros).any()
        assert binarize_guidewire(ones).all()

    def test_missing_guidewire_class_raises(self):
        fm = FeatureMap(probs=np.zeros((2, 8, 5)), classes=("B", "C"))
        with pytest.raises(ValueError):
            binarize_guidewire(fm)

    def test_profile_single_bin(self):
        probs = np.full((2, 10, 12), 0.1)
        probs[1, 4, 7] = 0.9
        fm = FeatureMap(probs=probs, classes=("B", "C"))
        sig = longitudinal_profile(fm)
        assert sig[1, 7] == 0.9
        assert np.all(sig[0] == 0.1)

    def test_profile_shift_invariant(self, rng):
        probs = rng.random((2, 12, 9))
        fm = FeatureMap(probs=probs, classes=("B", "C"))
        shifted = FeatureMap(probs=np.roll(probs, 5, axis=1), classes=("B", "C"))
        assert np.array_equal(longitudinal_profile(fm), longitudinal_profile(shifted))

    def test_profile_matches_bruteforce_max(self, rng):
        probs = rng.random((3, 16, 11))
        fm = FeatureMap(probs=probs, classes=("G", "B", "C"))
        sig = longitudinal_profile(fm)
        for c in range(3):
            for z in range(11):
                assert sig[c, z] == max(probs[c, :, z])


class TestTransport:
    def test_pure_longitudinal_shift(self):
        labels = np.zeros((2, 8, 40))
        labels[0, 3, 15] = 1.0
        p = TransformParams(s_z=1.0, t_z=3.0, theta=np.zeros(20),
                            t_u=np.zeros(20), t_v=np.zeros(20))
        out = transport_labels(labels, 0.3, p, 20, 0.3)
        # frame p reads arc p*0.3 + 3.0 -> source bin p + 10
        assert out[0, 3, 5] == 1.0
        assert out[0].sum() == 1.0

    def test_rotation_shifts_theta(self):
        labels = np.zeros((1, 8, 10))
        labels[0, 2, 4] = 1.0
        theta = np.full(10, 2.0 * np.pi * 3 / 8)
        p = TransformParams(s_z=1.0, t_z=0.0, theta=theta,
                            t_u=np.zeros(10), t_v=np.zeros(10))
        out = transport_labels(labels, 0.3, p, 10, 0.3)
        # fixed bin j reads source bin j+3: the structure appears at j = -3+2
        assert out[0, (2 - 3) % 8, 4] == 1.0

    def test_out_of_extent_reads_background(self):
        labels = np.ones((1, 4, 10))
        p = TransformParams(s_z=1.0, t_z=100.0, theta=np.zeros(5),
                            t_u=np.zeros(5), t_v=np.zeros(5))
        out = transport_labels(labels, 0.3, p, 5, 0.3)
        assert out.sum() == 0.0

    def test_bruteforce_transport_oracle(self, rng):
        labels = (rng.random((2, 12, 50)) > 0.8).astype(float)
        p = TransformParams(s_z=1.0, t_z=3.0,
                            theta=rng.choice(2 * np.pi * np.arange(12) / 12, 30),
                            t_u=np.zeros(30), t_v=np.zeros(30))
        out = transport_labels(labels, 0.3, p, 30, 0.3)
        expect = np.zeros_like(out)
        for frame in range(30):
            zi = int(round((p.s_z * frame * 0.3 + p.t_z) / 0.3))
            if not 0 <= zi < 50:
                continue
            shift = int(round(p.theta[frame] * 12 / (2 * np.pi)))
            for j in range(12):
                expect[:, j, frame] = labels[:, (j + shift) % 12, zi]
        assert np.array_equal(out, expect)

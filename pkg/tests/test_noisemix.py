import numpy as np
import pytest

from spectrast.core import ClassKind, ClassRegistry, LabeledDataset, Spectrum, WavenumberAxis
from spectrast.errors import ConfigError, DomainError, ShapeError
from spectrast.noisemix import (
    NoiseMixConfig,
    balanced_epoch,
    mix,
    resolve_background_sources,
    sample_alpha,
)

AX = WavenumberAxis(700, 1600, 480)

REGISTRY = ClassRegistry((
    ("bact_a", ClassKind.BACTERIAL),
    ("bact_b", ClassKind.BACTERIAL),
    ("slide", ClassKind.BACKGROUND),
    ("blank", ClassKind.BACKGROUND),
))


def make_dataset(per_class=4, seed=0):
    rng = np.random.default_rng(seed)
    spectra, labels = [], []
    for c in range(len(REGISTRY)):
        for _ in range(per_class):
            spectra.append(Spectrum(rng.random(480), AX))
            labels.append(c)
    return LabeledDataset(tuple(spectra), np.array(labels), REGISTRY)


class TestConfig:
    def test_alpha_max_strictly_inside_unit_interval(self):
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                NoiseMixConfig(alpha_max=bad)

    def test_per_epoch_positive(self):
        with pytest.raises(ConfigError):
            NoiseMixConfig(per_epoch_per_class=0)


class TestMix:
    def test_constant_inputs(self):
        ones = Spectrum(np.ones(480), AX)
        zeros = Spectrum(np.zeros(480), AX)
        out = mix(ones, zeros, 0.5)
        assert np.allclose(out.intensities, 0.5, atol=1e-15)

    def test_endpoints(self):
        rng = np.random.default_rng(1)
        a = Spectrum(rng.random(480), AX)
        b = Spectrum(rng.random(480), AX)
        assert np.allclose(mix(a, b, 0.0).intensities, a.intensities, atol=1e-15)
        assert np.allclose(mix(a, b, 1.0).intensities, b.intensities, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_convexity_bounds(self, seed):
        rng = np.random.default_rng(seed)
        a = Spectrum(rng.random(480), AX)
        b = Spectrum(rng.random(480), AX)
        alpha = rng.uniform(0, 1)
        out = mix(a, b, alpha).intensities
        lo = np.minimum(a.intensities, b.intensities)
        hi = np.maximum(a.intensities, b.intensities)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()

    def test_alpha_out_of_range(self):
        a = Spectrum(np.zeros(480), AX)
        with pytest.raises(DomainError):
            mix(a, a, 1.2)
        with pytest.raises(DomainError):
            mix(a, a, -0.1)
        with pytest.raises(DomainError):
            mix(a, a, 0.95, alpha_max=0.9)

    def test_axis_mismatch(self):
        a = Spectrum(np.zeros(480), AX)
        b = Spectrum(np.zeros(100), WavenumberAxis(700, 1600, 100))
        with pytest.raises(ShapeError):
            mix(a, b, 0.5)


class TestSampleAlpha:
    def test_uniform_statistics(self):
        cfg = NoiseMixConfig(alpha_max=0.9)
        rng = np.random.default_rng(0)
        n = 100_000
        draws = np.array([sample_alpha(cfg, rng) for _ in range(n)])
        assert draws.min() >= 0.0 and draws.max() <= cfg.alpha_max
        se = cfg.alpha_max / np.sqrt(12 * n)  # SD of Uniform[0, m] is m/sqrt(12)
        assert abs(draws.mean() - cfg.alpha_max / 2) <= 3 * se


class TestBackgroundSources:
    def test_defaults_to_background_kind(self):
        cfg = NoiseMixConfig()
        assert resolve_background_sources(cfg, REGISTRY) == (2, 3)

    def test_explicit_subset(self):
        cfg = NoiseMixConfig(background_sources=(3,))
        assert resolve_background_sources(cfg, REGISTRY) == (3,)

    def test_bacterial_source_rejected(self):
        cfg = NoiseMixConfig(background_sources=(0,))
        with pytest.raises(ConfigError):
            resolve_background_sources(cfg, REGISTRY)

    def test_no_background_classes(self):
        reg = ClassRegistry((("a", ClassKind.BACTERIAL),))
        with pytest.raises(ConfigError):
            resolve_background_sources(NoiseMixConfig(), reg)


class TestBalancedEpoch:
    def test_exact_class_balance(self):
        ds = make_dataset()
        cfg = NoiseMixConfig(per_epoch_per_class=7)
        out = balanced_epoch(ds, cfg, np.random.default_rng(0))
        counts = np.bincount(out.labels, minlength=len(REGISTRY))
        assert (counts == 7).all()

    def test_outputs_in_unit_interval(self):
        ds = make_dataset()
        out = balanced_epoch(ds, NoiseMixConfig(per_epoch_per_class=5),
                             np.random.default_rng(1))
        mat = out.as_matrix()
        assert mat.min() >= 0.0 and mat.max() <= 1.0

    def test_background_rows_pass_through_unmixed(self):
        ds = make_dataset()
        out = balanced_epoch(ds, NoiseMixConfig(per_epoch_per_class=6),
                             np.random.default_rng(2))
        originals = {c: ds.as_matrix()[ds.indices_of_class(c)]
                     for c in (2, 3)}
        for spec, label in zip(out.spectra, out.labels):
            if label in originals:
                match = (originals[label] == spec.intensities).all(axis=1)
                assert match.any()

    def test_deterministic_given_rng(self):
        ds = make_dataset()
        cfg = NoiseMixConfig(per_epoch_per_class=4)
        a = balanced_epoch(ds, cfg, np.random.default_rng(9)).as_matrix()
        b = balanced_epoch(ds, cfg, np.random.default_rng(9)).as_matrix()
        assert np.array_equal(a, b)

    def test_missing_class_rejected(self):
        ds = make_dataset()
        sub = ds.subset(np.flatnonzero(ds.labels != 1))
        with pytest.raises(ConfigError):
            balanced_epoch(sub, NoiseMixConfig(), np.random.default_rng(0))

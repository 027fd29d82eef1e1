import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from opengcd import dcpd, evalkit, synthbench
from opengcd.config import ConfigError, SynthConfig
from opengcd.core_math import RngState


def test_generate_shapes_and_split():
    task = synthbench.generate(SynthConfig(), 0)
    assert task.dim == 32 and task.n_classes == 20
    assert task.known == tuple(range(10))
    assert set(task.source_y) == set(range(10))
    assert set(task.target_y) == set(range(20))
    assert task.source_x.shape == (1000, 32) and task.target_x.shape == (1000, 32)


def test_generate_is_seeded():
    a = synthbench.generate(SynthConfig(), 3)
    b = synthbench.generate(SynthConfig(), 3)
    assert a.target_x.tobytes() == b.target_x.tobytes()
    assert a.source_x.tobytes() == b.source_x.tobytes()


def test_zero_sigma_gives_zero_spread():
    task = synthbench.generate(SynthConfig(class_sigma=0.0, shift_noise=0.0), 1)
    assert task.sigma2_intra == 0.0


def test_margin_ratio_is_met():
    for ratio in (0.5, 2.0):
        task = synthbench.generate(SynthConfig(margin_ratio=ratio), 2)
        assert task.sigma2_intra / task.delta_inter == pytest.approx(ratio, rel=0.2)


def test_margin_ratio_infeasible():
    with pytest.raises(ConfigError):
        synthbench.generate(SynthConfig(radius=1e-300, margin_ratio=1.0, n_classes=2), 0)


def test_identity_shift():
    rng = RngState(0)
    X = rng.normal((10, 4))
    np.testing.assert_array_equal(synthbench.apply_shift(X, np.zeros(10), synthbench.ShiftSpec.identity(4), rng), X)


def test_rotation_is_an_isometry():
    rng = RngState(1)
    X = rng.normal((30, 8))
    shift = synthbench.ShiftSpec.random(8, rng, angle=0.9)
    Y = synthbench.apply_shift(X, np.zeros(30), shift, rng)
    d0 = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d1 = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-8


def test_shift_noise_adds_variance():
    cfg = SynthConfig(shift_noise=0.0, shift_translation=0.0, target_per_class=400)
    clean = synthbench.generate(cfg, 4)
    noisy = synthbench.generate(SynthConfig(shift_noise=0.5, shift_translation=0.0, target_per_class=400), 4)
    _, s_clean = evalkit.margin_stats(clean.target_x, clean.target_y)
    _, s_noisy = evalkit.margin_stats(noisy.target_x, noisy.target_y)
    assert s_noisy - s_clean == pytest.approx(0.25 * 32, rel=0.05)


def test_patch_sets_are_valid_and_seeded():
    world = synthbench.PartWorld.create(8, 4, 3, RngState(0))
    a = synthbench.patch_feature_synthesizer(np.ones(8), world, RngState(5))
    b = synthbench.patch_feature_synthesizer(np.ones(8), world, RngState(5))
    np.testing.assert_allclose(a.A_cls.sum(1), 1.0)
    np.testing.assert_array_equal(a.F_patch, b.F_patch)
    assert set(a.part_labels) == set(range(4))


def test_noise_free_parts_are_recovered():
    rng = RngState(6)
    world = synthbench.PartWorld.create(8, 4, 3, rng)
    sets = [synthbench.patch_feature_synthesizer(x, world, rng, noise=0.0) for x in rng.normal((10, 8))]
    for s in sets:
        Q = dcpd.fit_routing([s], 4, RngState(7))
        _, _, H = dcpd.assign_patches(s.F_patch, Q, 0.1, mode="deterministic")
        assert adjusted_rand_score(s.part_labels, H.argmax(1)) == 1.0


def test_build_datasets():
    cfg = SynthConfig(n_classes=4, per_class=5, target_per_class=3)
    task = synthbench.generate(cfg, 0)
    source, target, _ = synthbench.build_datasets(task)
    assert source.F_patch.shape == (10, 24, 32) and target.F_patch.shape == (12, 24, 32)
    assert source.classes == (0, 1) and target.classes == (0, 1, 2, 3)

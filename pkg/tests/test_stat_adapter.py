import math
import numpy as np
import pytest
import torch
from conftest import central_difference, kink_pattern, random_video
from tal_scale_wizard.src import stat_adapter
from tal_scale_wizard.src.snippet_data import Dataset, FeatureSequence, VideoRecord
from tal_scale_wizard.src.stat_adapter import (
    AdaptConfig,
    CalibrationTarget,
    RefineConfig,
    StatAdapter,
    TeacherStudent,
    adapt,
    blur_augment,
    gaussian_kernel,
    loss_att,
    loss_cal,
    loss_cas,
    ema_update,
    refine_attention,
    salience_sample,
    salience_windows,
    total_adapt_loss,
)
from tal_scale_wizard.src.wtal_model import WtalModel


def test_gaussian_kernel():
    k = gaussian_kernel(1.0, 5)
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k[::-1])
    np.testing.assert_array_equal(gaussian_kernel(0.0, 3), [0.0, 1.0, 0.0])


def test_blur_augment():
    data = np.random.default_rng(0).standard_normal((6, 3)).astype(np.float32)
    feats = FeatureSequence(data, 1.0)
    same = blur_augment(feats, AdaptConfig(blur_sigma=0.0))
    np.testing.assert_allclose(same.data, data.astype(np.float64))
    flat = FeatureSequence(np.ones((5, 2), dtype=np.float32), 1.0)
    np.testing.assert_allclose(blur_augment(flat, AdaptConfig()).data, 1.0)


def test_salience_sample_example():
    phi = np.array([0.1, 0.9, 0.2, 0.8, 0.3])
    assert salience_sample(phi, 2, 1) == (0.9, 0.8)
    assert salience_sample(phi, 0, 1) == (0.1, 0.9)
    assert salience_sample(phi, 4, 1) == (0.8, 0.3)
    assert salience_sample(phi, 2, 3) == (0.9, 0.8)
    with pytest.raises(IndexError):
        salience_sample(phi, 5, 1)


def test_salience_windows_match_loop():
    rng = np.random.default_rng(3)
    for eta in (1, 3, 22):
        phi = rng.random(30)
        left, right = salience_windows(phi, eta)
        for n in range(len(phi)):
            lw, rw = phi[max(0, n - eta) : n], phi[n + 1 : n + 1 + eta]
            assert left[n] == (lw.max() if lw.size else phi[n])
            assert right[n] == (rw.max() if rw.size else phi[n])


def test_refine_attention_example():
    phi = np.array([0.1, 0.9, 0.2, 0.8, 0.3])
    refined = refine_attention(phi, RefineConfig(eta=1, alpha=0.5))
    np.testing.assert_allclose(refined, [0.1, 0.9, 0.5, 0.8, 0.3])


def test_refine_attention_properties():
    rng = np.random.default_rng(11)
    for case in range(1000):
        eta = (1, 3, 22)[case % 3]
        phi = rng.random(int(rng.integers(1, 60)))
        left, right = salience_windows(phi, eta)
        reference = np.minimum(left, right)
        triggered = phi < reference

        np.testing.assert_array_equal(refine_attention(phi, RefineConfig(eta=eta, alpha=1.0)), phi)
        constant = np.full_like(phi, phi[0])
        np.testing.assert_array_equal(refine_attention(constant, RefineConfig(eta=eta, alpha=0.3)), constant)

        for alpha in (0.0, 0.1, 0.5):
            refined = refine_attention(phi, RefineConfig(eta=eta, alpha=alpha))
            assert np.all(refined[triggered] >= phi[triggered] - 1e-15)
            assert np.all(refined[triggered] <= reference[triggered] + 1e-15)
            assert np.all(refined <= np.maximum(np.maximum(left, right), phi) + 1e-15)
            np.testing.assert_array_equal(refined[~triggered], phi[~triggered])

        refined = refine_attention(phi, RefineConfig(eta=eta, alpha=1.4))
        assert np.all((refined >= 0) & (refined <= 1))
        assert np.all(refined[triggered] <= phi[triggered] + 1e-15)


def test_loss_values():
    phi = np.array([0.2, 0.7])
    assert float(loss_att(phi, phi)) == 0.0
    assert float(loss_att(np.array([1.0, 0.0]), np.array([0.0, 0.0]))) == pytest.approx(0.5)
    psi = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert float(loss_cas(psi, psi)) == pytest.approx(0.0, abs=1e-12)
    expected_kl = 0.5 * (0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75))
    assert float(loss_cas(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]))) == pytest.approx(2 * expected_kl)
    assert float(loss_cal(np.array([0.5]), np.array([[0.5, 0.5]]))) == pytest.approx(math.log(2))
    complement = loss_cal(np.array([1.0]), np.array([[1.0, 0.0]]), CalibrationTarget.COMPLEMENT)
    assert float(complement) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        loss_att(np.zeros(3), np.zeros(4))


def test_ema_exactness():
    base = WtalModel(4, 3, 4)
    base.reset_parameters(seed=0)
    ts = TeacherStudent.from_base(base)
    ts.student.reset_parameters(seed=1)
    t0 = ts.teacher.flat_vector()
    s = ts.student.flat_vector()
    scale = np.abs(t0 - s).max()
    for k in range(1, 51):
        ema_update(ts, 0.9)
        np.testing.assert_allclose(ts.teacher.flat_vector() - s, 0.9**k * (t0 - s), rtol=0, atol=1e-12 * scale)
    np.testing.assert_array_equal(ts.student.flat_vector(), s)


def test_ema_endpoints():
    base = WtalModel(4, 3, 4)
    base.reset_parameters(seed=0)
    ts = TeacherStudent.from_base(base)
    ts.student.reset_parameters(seed=1)
    t0 = ts.teacher.flat_vector()
    ema_update(ts, 1.0)
    np.testing.assert_array_equal(ts.teacher.flat_vector(), t0)
    ema_update(ts, 0.0)
    np.testing.assert_array_equal(ts.teacher.flat_vector(), ts.student.flat_vector())
    with pytest.raises(ValueError):
        ema_update(ts, 1.5)


def test_student_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    cfg = AdaptConfig(lambda_att=1.0, lambda_cas=1.0, lambda_cal=0.1)
    adapter = StatAdapter(RefineConfig(eta=3, alpha=0.5), cfg)
    for instance in range(10):
        n, d, h = int(rng.integers(4, 17)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        base = WtalModel(feature_dim=d, num_classes=3, hidden_dim=h)
        base.reset_parameters(seed=instance)
        ts = TeacherStudent.from_base(base)
        ts.student.reset_parameters(seed=100 + instance)
        batch = [random_video(rng, n, d, 3, video_id=f"v{j}") for j in range(2)]
        analytic = adapter.student_gradients(ts, batch)

        def loss_fn():
            return adapter.batch_components(ts, batch, {}, dropout_on=False)["total"].item()

        def pattern_fn():
            return kink_pattern(ts.student, batch)

        checked = 0
        names = list(WtalModel.PARAM_ORDER)
        while checked < 20:
            name = names[int(rng.integers(len(names)))]
            index = tuple(int(rng.integers(s)) for s in analytic[name].shape)
            numeric = central_difference(loss_fn, ts.student, name, index, pattern_fn=pattern_fn)
            if numeric is None:
                continue
            np.testing.assert_allclose(analytic[name][index], numeric, rtol=1e-4, atol=1e-7, err_msg=f"{name}{index}")
            checked += 1


def _base(tiny_train):
    model = WtalModel(tiny_train.feature_dim, tiny_train.num_classes, hidden_dim=8)
    model.reset_parameters(seed=0)
    return model


def test_zero_weights_leave_teacher_unchanged(tiny_train):
    base = _base(tiny_train)
    cfg = AdaptConfig(lambda_att=0.0, lambda_cas=0.0, lambda_cal=0.0, epochs=2, batch_size=4)
    teacher = adapt(base, tiny_train, RefineConfig(eta=3, alpha=0.5), cfg)
    np.testing.assert_array_equal(teacher.flat_vector(), base.flat_vector())


def test_adaptation_is_deterministic_and_logged(tiny_train):
    base = _base(tiny_train)
    cfg = AdaptConfig(epochs=2, batch_size=4, learning_rate=1e-3)
    a = StatAdapter(RefineConfig(eta=3, alpha=0.5), cfg)
    b = StatAdapter(RefineConfig(eta=3, alpha=0.5), cfg)
    np.testing.assert_array_equal(a.adapt(base, tiny_train).flat_vector(), b.adapt(base, tiny_train).flat_vector())
    assert list(a.history.columns) == ["epoch", "L_att", "L_cas", "L_cal", "total"]
    assert list(a.history["epoch"]) == [1, 2]
    assert not np.array_equal(a.inference_model().flat_vector(), base.flat_vector())


def test_adaptation_ignores_labels(tiny_train):
    unlabeled = Dataset(
        distribution_id=tiny_train.distribution_id,
        split=tiny_train.split,
        videos=tuple(
            VideoRecord(
                id=v.id,
                features=v.features,
                label=np.zeros_like(v.label),
                instances=(),
                duration=v.duration,
            )
            for v in tiny_train.videos
        ),
        num_classes=tiny_train.num_classes,
    )
    base = _base(tiny_train)
    cfg = AdaptConfig(epochs=1, batch_size=4, learning_rate=1e-3)
    refine = RefineConfig(eta=3, alpha=0.5)
    np.testing.assert_array_equal(
        adapt(base, tiny_train, refine, cfg).flat_vector(), adapt(base, unlabeled, refine, cfg).flat_vector()
    )


def test_frozen_teacher_evaluates_student(tiny_train):
    base = _base(tiny_train)
    adapter = StatAdapter(RefineConfig(eta=3, alpha=0.5), AdaptConfig(epochs=1, batch_size=4, ema_enabled=False))
    adapter.adapt(base, tiny_train)
    np.testing.assert_array_equal(adapter.ts.teacher.flat_vector(), base.flat_vector())
    assert adapter.inference_model() is adapter.ts.student


def test_inference_model_requires_adapt():
    with pytest.raises(ValueError):
        StatAdapter(RefineConfig(eta=1, alpha=0.5), AdaptConfig()).inference_model()


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(eta=0, alpha=0.5)
    with pytest.raises(ValueError):
        AdaptConfig(ema_momentum=1.5)
    with pytest.raises(ValueError):
        AdaptConfig(blur_kernel=4)


def test_blur_spreads_an_impulse():
    np.testing.assert_allclose(gaussian_kernel(1.0, 3), [0.274, 0.452, 0.274], atol=1e-3)
    data = np.zeros((5, 1), dtype=np.float32)
    data[2, 0] = 1.0
    blurred = blur_augment(FeatureSequence(data, 1.0), AdaptConfig(blur_sigma=1.0, blur_kernel=3))
    np.testing.assert_allclose(blurred.data[:, 0], [0.0, 0.274, 0.452, 0.274, 0.0], atol=1e-3)


def test_refine_attention_clamps_overshoot():
    # 1.4 * 0.1 - 0.4 * 0.9 = -0.22
    phi = np.array([0.9, 0.1, 0.9])
    np.testing.assert_allclose(refine_attention(phi, RefineConfig(eta=1, alpha=1.4)), [0.9, 0.0, 0.9])
    unclamped = refine_attention(phi, RefineConfig(eta=1, alpha=1.4, clamp=False))
    assert unclamped[1] == pytest.approx(-0.22)


def test_refine_attention_hand_case():
    # left max 0.8, right max 0.6
    phi = np.array([0.8, 0.2, 0.6])
    assert refine_attention(phi, RefineConfig(eta=1, alpha=0.5))[1] == pytest.approx(0.4)


def test_loss_cas_is_non_negative():
    rng = np.random.default_rng(17)
    for _ in range(200):
        n, c = int(rng.integers(1, 20)), int(rng.integers(2, 10))
        psi_T = rng.dirichlet(np.ones(c), size=n)
        psi_S = rng.dirichlet(np.ones(c), size=n)
        assert float(loss_cas(psi_T, psi_S)) >= 0.0
    assert float(loss_cas(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))) == pytest.approx(math.log(2))


def test_total_adapt_loss_weights_components(monkeypatch):
    monkeypatch.setattr(stat_adapter, "loss_att", lambda *args: torch.tensor(0.5, dtype=torch.float64))
    monkeypatch.setattr(stat_adapter, "loss_cas", lambda *args: torch.tensor(0.7, dtype=torch.float64))
    monkeypatch.setattr(stat_adapter, "loss_cal", lambda *args: torch.tensor(1.0, dtype=torch.float64))
    phi, psi = np.zeros(2), np.full((2, 2), 0.5)
    cfg = AdaptConfig(lambda_att=1.0, lambda_cas=1.0, lambda_cal=0.1)
    assert float(total_adapt_loss(phi, psi, phi, psi, cfg)) == pytest.approx(1.3)
    att_only = AdaptConfig(lambda_att=1.0, lambda_cas=0.0, lambda_cal=0.0)
    assert float(total_adapt_loss(phi, psi, phi, psi, att_only)) == pytest.approx(0.5)


def test_teacher_is_a_convex_combination_of_students(tiny_train, monkeypatch):
    students = []
    real_update = stat_adapter.ema_update

    def recording_update(ts, m):
        students.append(ts.student.flat_vector())
        return real_update(ts, m)

    monkeypatch.setattr(stat_adapter, "ema_update", recording_update)
    base = _base(tiny_train)
    m = 0.9
    cfg = AdaptConfig(epochs=2, batch_size=4, learning_rate=1e-3, ema_momentum=m)
    teacher = adapt(base, tiny_train, RefineConfig(eta=3, alpha=0.5), cfg)

    steps = len(students)
    assert steps == 2 * math.ceil(len(tiny_train.videos) / 4)
    weights = [(1 - m) * m ** (steps - 1 - j) for j in range(steps)]
    assert m**steps + sum(weights) == pytest.approx(1.0)
    expected = m**steps * base.flat_vector() + sum(w * s for w, s in zip(weights, students))
    np.testing.assert_allclose(teacher.flat_vector(), expected, rtol=0, atol=1e-10)

import numpy as np
import pytest

from sedkit.ema import EMASchedule, TeacherState, current_alpha, ema_update, init_teacher


def test_init_copies_deeply():
    student = {"w": np.arange(4.0)}
    for policy in ("none", "step", "cosine"):
        t = init_teacher(student, EMASchedule(policy=policy))
        np.testing.assert_array_equal(t.params["w"], student["w"])
    t = init_teacher(student)
    student["w"] += 10
    np.testing.assert_array_equal(t.params["w"], np.arange(4.0))


def test_schedules():
    step = EMASchedule("step", 0.99, 0.9, milestone=120_000, total=180_000)
    assert current_alpha(step, 0) == 0.99
    assert current_alpha(step, 119_999) == 0.99
    assert current_alpha(step, 120_000) == 0.9
    cos = EMASchedule("cosine", 0.996, 0.9, total=1000)
    assert current_alpha(cos, 0) == pytest.approx(0.996)
    assert current_alpha(cos, 1000) == pytest.approx(0.9)
    none = EMASchedule("none", 0.95)
    assert {current_alpha(none, i) for i in range(0, 5000, 250)} == {0.95}
    with pytest.raises(ValueError):
        EMASchedule("linear").validate()
    with pytest.raises(ValueError):
        EMASchedule(alpha_start=1.5).validate()


def test_single_update_scalar():
    t = TeacherState({"w": np.array([1.0])}, EMASchedule("none", 0.99))
    ema_update(t, {"w": np.array([0.0])}, 0)
    assert t.params["w"][0] == pytest.approx(0.99, abs=1e-15)


def test_gap_decays_geometrically():
    rng = np.random.default_rng(0)
    s = {"w": rng.normal(size=(3, 3)), "b": rng.normal(size=3)}
    t = TeacherState({k: v + rng.normal(size=v.shape) for k, v in s.items()}, EMASchedule("none", 0.9))
    gap0 = max(np.abs(t.params[k] - s[k]).max() for k in s)
    for k in range(1, 60):
        ema_update(t, s, k)
        gap = max(np.abs(t.params[k2] - s[k2]).max() for k2 in s)
        assert gap == pytest.approx(0.9 ** k * gap0, abs=1e-9)


def test_effective_window():
    a = 0.9
    assert a / (1 - a) == pytest.approx(9.0)


def test_update_order_and_shape_checks():
    t = init_teacher({"w": np.zeros(2)})
    ema_update(t, {"w": np.ones(2)}, 5)
    with pytest.raises(ValueError):
        ema_update(t, {"w": np.ones(2)}, 5)
    with pytest.raises(ValueError):
        ema_update(t, {"v": np.ones(2)}, 6)
    with pytest.raises(ValueError):
        ema_update(t, {"w": np.ones(3)}, 7)

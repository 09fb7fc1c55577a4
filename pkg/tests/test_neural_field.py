import numpy as np
import pytest

from lab.fpe_solver import TimeField
from lab.grid import FaceField
from lab.harness.report_store import ReportStore
from lab.neural_field import (
    Activation,
    WideNet,
    concatenate_schedules,
    evaluate_wide,
    fit_wide,
    oscillation_schedule,
    piecewise_oscillation_schedule,
    piecewise_wide_timefield,
    read_schedule_csv,
    schedule_as_timefield,
    weak_pairing_defect,
    wide_timefield,
)


def _sine_target(points: np.ndarray) -> np.ndarray:
    return np.sin(np.pi * points)


@pytest.fixture
def sine_net(grid_1d):
    return fit_wide(_sine_target, m=16, activation="logistic", seed=3, grid=grid_1d)


@pytest.mark.parametrize("kind,constant", [("relu", 1.0), ("logistic", 0.25), ("tanh", 1.0)])
def test_activation_lipschitz(kind, constant):
    activation = Activation(kind)
    assert activation.lipschitz_constant == constant
    assert activation.verify_lipschitz()


def test_unknown_activation_is_rejected():
    with pytest.raises(ValueError, match="激活函数"):
        Activation("softplus")


def test_wide_net_shape_checks():
    activation = Activation("tanh")
    with pytest.raises(ValueError):
        WideNet(A=np.zeros((2, 1, 1)), W=np.zeros((3, 1, 1)), B=np.zeros((2, 1)), activation=activation)
    with pytest.raises(ValueError):
        WideNet(A=np.zeros((0, 1, 1)), W=np.zeros((0, 1, 1)), B=np.zeros((0, 1)), activation=activation)


def test_wide_net_evaluation_and_lipschitz():
    net = WideNet(
        A=np.array([[[2.0]], [[-1.0]]]),
        W=np.array([[[3.0]], [[1.0]]]),
        B=np.array([[0.0], [0.5]]),
        activation=Activation("tanh"),
    )
    x = np.array([[0.2], [0.7]])
    expected = 2.0 * np.tanh(3.0 * x) - np.tanh(x + 0.5)
    assert evaluate_wide(net, x) == pytest.approx(expected)
    assert net.term_lipschitz == pytest.approx([6.0, 1.0])
    assert net.lipschitz == pytest.approx(7.0)


def test_fit_wide_reproduces_smooth_target(sine_net, grid_1d):
    assert sine_net.m == 16
    assert sine_net.fit_residual < 0.05
    fitted = FaceField.from_function(grid_1d, sine_net.evaluate)
    target = FaceField.from_function(grid_1d, _sine_target)
    assert (fitted - target).sup_norm == pytest.approx(sine_net.fit_residual)


def test_fit_wide_residual_decreases_with_width(grid_1d):
    residuals = [fit_wide(_sine_target, m=m, seed=3, grid=grid_1d).fit_residual for m in (4, 8, 16, 32)]
    assert all(b < a for a, b in zip(residuals, residuals[1:]))


def test_fit_wide_coefficients_stay_bounded(sine_net):
    # 外层系数与目标同量级，不靠大系数相互抵消
    assert np.abs(sine_net.A).max() < 5.0
    assert sine_net.lipschitz < 150.0


def test_fit_wide_feature_layout(sine_net):
    W, B = sine_net.W[:, 0, 0], sine_net.B[:, 0]
    assert W[0] == 0.0 and B[0] == 1.0
    assert np.all(W[1:] > 0)
    centers = -B[1:] / W[1:]
    assert np.all(np.diff(centers) > 0)
    assert centers[0] > 0.0 and centers[-1] < 1.0


def test_fit_wide_on_plane(grid_2d):
    target = FaceField.from_function(grid_2d, lambda p: np.stack([0.3 * p[:, 1], -0.2 * p[:, 0]], axis=1))
    net = fit_wide(target, m=24, activation="tanh", seed=1)
    assert net.dim == 2
    assert net.fit_residual < 0.25 * target.sup_norm


def test_fit_wide_from_face_field(grid_1d):
    target = FaceField.from_function(grid_1d, lambda p: 0.5 * np.sin(np.pi * p))
    net = fit_wide(target, m=24, activation="tanh", seed=0)
    assert net.dim == 1
    assert net.fit_residual < 0.05
    with pytest.raises(ValueError):
        fit_wide(_sine_target, m=4)
    with pytest.raises(ValueError):
        fit_wide(_sine_target, m=0, grid=grid_1d)


def test_fit_wide_is_deterministic(grid_1d):
    a = fit_wide(_sine_target, m=8, seed=5, grid=grid_1d)
    b = fit_wide(_sine_target, m=8, seed=5, grid=grid_1d)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.W, b.W) and np.array_equal(a.B, b.B)


@pytest.mark.parametrize("N", [1, 3, 8])
def test_oscillation_schedule_layout(sine_net, N):
    schedule = oscillation_schedule(sine_net, N, 0.5)
    assert schedule.n_intervals == sine_net.m * N
    assert schedule.horizon == 0.5
    assert np.allclose(np.diff(schedule.breakpoints), 0.5 / (sine_net.m * N))
    # Lipschitz 常数与 N 无关
    assert schedule.lipschitz == pytest.approx(sine_net.m * sine_net.term_lipschitz.max())


def test_one_period_average_equals_wide(sine_net):
    schedule = oscillation_schedule(sine_net, 2, 1.0)
    x = np.linspace(0.05, 0.95, 7)[:, None]
    first_period = [schedule.evaluate_interval(k, x) for k in range(sine_net.m)]
    scale = float(np.abs(sine_net.A).max()) * sine_net.m
    assert np.mean(first_period, axis=0) == pytest.approx(sine_net.evaluate(x), rel=1e-9, abs=1e-12 * scale)


def test_oscillation_schedule_rejects_bad_arguments(sine_net):
    with pytest.raises(ValueError):
        oscillation_schedule(sine_net, 0, 1.0)
    with pytest.raises(ValueError):
        oscillation_schedule(sine_net, 1, 0.0)


def test_schedule_csv_round_trip(tmp_path, sine_net):
    schedule = oscillation_schedule(sine_net, 2, 1.0)
    path = tmp_path / "schedule.csv"
    schedule.to_csv(path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "t_start,t_end,A_flat,W_flat,B"
    loaded = read_schedule_csv(path, "logistic")
    assert np.array_equal(loaded.breakpoints, schedule.breakpoints)
    assert np.array_equal(loaded.A, schedule.A)
    assert np.array_equal(loaded.B, schedule.B)
    assert loaded.lipschitz == pytest.approx(schedule.lipschitz)


def test_schedule_written_through_report_store(tmp_path, sine_net):
    schedule = oscillation_schedule(sine_net, 2, 1.0)
    rows = [{"N": 1.0, "traj_error": 0.1}]
    ReportStore(tmp_path).write_extras([("schedule.csv", schedule), ("extra.csv", rows)])
    assert sorted(p.name for p in tmp_path.iterdir()) == ["extra.csv", "schedule.csv"]
    assert (tmp_path / "schedule.csv").read_text(encoding="utf-8") == schedule.to_csv_text()
    assert np.array_equal(read_schedule_csv(tmp_path / "schedule.csv").A, schedule.A)


def test_schedule_as_timefield_shares_fields(sine_net, grid_1d):
    schedule = oscillation_schedule(sine_net, 4, 1.0)
    drift = schedule_as_timefield(schedule, grid_1d)
    assert isinstance(drift, TimeField)
    assert drift.n_intervals == schedule.n_intervals
    assert drift.fields[0] is drift.fields[sine_net.m]
    assert drift.lipschitz == schedule.lipschitz
    constant = wide_timefield(sine_net, grid_1d, 1.0)
    assert constant.n_intervals == 1
    assert constant.lipschitz == pytest.approx(sine_net.lipschitz)


def test_piecewise_schedules(sine_net, grid_1d):
    other = fit_wide(lambda p: -_sine_target(p), m=16, seed=3, grid=grid_1d)
    slabs = [0.0, 0.4, 1.0]
    schedule = piecewise_oscillation_schedule([sine_net, other], slabs, 3)
    assert schedule.n_intervals == 2 * 16 * 3
    assert schedule.horizon == pytest.approx(1.0)
    assert 0.4 == pytest.approx(schedule.breakpoints[16 * 3])
    assert schedule.evaluate(0.9, np.array([[0.5]])).shape == (1, 1)
    reference = piecewise_wide_timefield([sine_net, other], slabs, grid_1d)
    assert reference.n_intervals == 2
    with pytest.raises(ValueError):
        piecewise_oscillation_schedule([sine_net], slabs, 3)
    with pytest.raises(ValueError):
        concatenate_schedules([])


def test_weak_pairing_defect_decays_with_frequency(sine_net, grid_1d):
    def test_fn(t, p):
        return t * p**2

    defects = [weak_pairing_defect(oscillation_schedule(sine_net, N, 1.0), sine_net, test_fn, grid_1d)
               for N in (1, 2, 4, 8)]
    assert all(b < a for a, b in zip(defects, defects[1:]))
    # 线性时间权重下配对差按 1/N 衰减
    assert defects[1] / defects[3] == pytest.approx(4.0, rel=0.05)


def test_weak_pairing_defect_vanishes_for_time_constant_tests(sine_net, grid_1d):
    schedule = oscillation_schedule(sine_net, 3, 1.0)
    defect = weak_pairing_defect(schedule, sine_net, lambda t, p: np.cos(np.pi * p), grid_1d)
    scale = float(np.abs(sine_net.A).max()) * sine_net.m
    assert defect < 1e-10 * scale

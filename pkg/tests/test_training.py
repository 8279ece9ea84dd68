import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from goalfem.mesh import build_interval_mesh, build_square_mesh
from goalfem.problems import get_benchmark, make_discretization, make_problem
from goalfem.spaces import build_space
from goalfem.training import (Adam, GradientDescent, LBFGS, MixedDiscretization,
                              OptimalTestDiscretization, TrainingConfig, TrainingError,
                              TrainingSet, grad_loss, loss, loss_and_grad, qoi_error_sweep,
                              train, train_with_restarts, write_sweep_csv)
from goalfem.weightnet import WeightNet


def line(n, bc="left_dirichlet"):
    return build_space(build_interval_mesh(n), 1, bc)


def diffusion_disc(net, x0=(0.6,), trial=1, test=1):
    prob = make_problem("diffusion_1d", [{"kind": "point", "x0": x} for x in x0])
    return MixedDiscretization(line(trial), line(test), prob, net)


def advection_disc(net, trial=2, test=16, x0=(0.9,)):
    prob = make_problem("advection_1d", [{"kind": "point", "x0": x} for x in x0])
    return MixedDiscretization(line(trial), line(test, "none"), prob, net)


def self_labelled(disc, theta, lambdas):
    return TrainingSet(lambdas, disc.qois(theta, lambdas))


def fd_grad(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


# -- training set ---------------------------------------------------------------------


def test_training_set_validation():
    with pytest.raises(ValueError):
        TrainingSet([0.1, 0.1], [1.0, 2.0])
    with pytest.raises(ValueError):
        TrainingSet([0.1, 0.2], [1.0, np.nan])
    ts = TrainingSet.from_oracle([0.1, 0.2], lambda l: [l, 2 * l])
    assert ts.values.shape == (2, 2) and len(ts) == 2


# -- loss ------------------------------------------------------------------------------


def test_galerkin_loss_closed_form():
    disc = diffusion_disc(WeightNet(1, 1, "exp"))
    lam = 0.1 * np.arange(1, 10)
    ts = TrainingSet(lam, np.minimum(0.6, lam))
    expected = 0.5 * np.sum((np.minimum(0.6, lam) - 0.6 * lam) ** 2)
    assert loss(np.zeros(3), ts, disc) == pytest.approx(expected, rel=1e-13)


def test_self_labelled_loss_and_gradient_vanish():
    net = WeightNet(1, 3, "sigmoid")
    disc = advection_disc(net)
    theta = net.init_theta(1)
    ts = self_labelled(disc, theta, np.linspace(0, 1, 5))
    J, g = loss_and_grad(theta, ts, disc)
    assert J == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_doubling_qois_scales_loss_by_four():
    net = WeightNet(1, 2, "sigmoid")
    disc = advection_disc(net)
    theta = net.init_theta(3)
    ts = TrainingSet([0.1, 0.4, 0.7], [0.2, 0.1, 0.01])
    J = loss(theta, ts, disc)
    disc.Q = 2 * disc.Q
    assert loss(theta, TrainingSet(ts.lambdas, 2 * ts.values), disc) == pytest.approx(4 * J)


def test_multi_qoi_loss_is_sum_of_single_losses():
    net = WeightNet(1, 3, "sigmoid")
    theta = net.init_theta(4)
    lam = np.linspace(0, 1, 6)
    y = np.column_stack([0.5 * np.maximum(0.3 - lam, 0) ** 2, 0.5 * np.maximum(0.7 - lam, 0) ** 2])
    both = loss(theta, TrainingSet(lam, y), advection_disc(net, x0=(0.3, 0.7)))
    parts = [loss(theta, TrainingSet(lam, y[:, k]), advection_disc(net, x0=(x,)))
             for k, x in enumerate((0.3, 0.7))]
    assert both == pytest.approx(sum(parts), rel=1e-13)


def test_relative_loss_kind():
    disc = diffusion_disc(WeightNet(1, 1, "exp"))
    lam = np.array([0.3, 0.8])
    y = np.minimum(0.6, lam)
    J = loss(np.zeros(3), TrainingSet(lam, y), disc, kind="relative")
    assert J == pytest.approx(0.5 * np.sum(((0.6 * lam - y) / y) ** 2))
    with pytest.raises(ValueError):
        loss(np.zeros(3), TrainingSet([0.0], [0.0]), disc, kind="relative")
    with pytest.raises(ValueError):
        loss(np.zeros(3), TrainingSet(lam, y), disc, kind="huber")


# -- adjoint gradient ----------------------------------------------------------------------


def test_gradient_toy_system(rng):
    # n = 1, m = 2: one trial function x, two test hats
    net = WeightNet(1, 1, "sigmoid")
    disc = diffusion_disc(net, test=2)
    ts = TrainingSet([0.3, 0.7], [0.3, 0.6])
    for _ in range(3):
        theta = rng.uniform(-2, 2, 3)
        g = grad_loss(theta, ts, disc)
        fd = fd_grad(lambda t: loss(t, ts, disc), theta)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


CASES = [
    ("diffusion1d", "vh4"), ("diffusion1d", "optimal"), ("advection1d", "2el"),
    ("advection1d_2qoi", "3el"), ("diffusion2d", "5dof"),
]


@pytest.mark.parametrize("bid, variant", CASES)
def test_gradient_matches_fd_on_benchmarks(bid, variant, rng):
    b = get_benchmark(bid)
    disc = make_discretization(b, variant)
    ts = b.training_set()
    kind = b.training_config(variant).loss_kind
    theta = rng.uniform(-1, 1, disc.net.num_params)
    g = grad_loss(theta, ts, disc, kind)
    fd = fd_grad(lambda t: loss(t, ts, disc, kind), theta)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_gradient_permutes_with_neurons(rng):
    net = WeightNet(1, 3, "sigmoid")
    disc = advection_disc(net)
    ts = TrainingSet([0.1, 0.5], [0.3, 0.05])
    theta = rng.uniform(-1, 1, 9)
    perm = [1, 2, 0]
    g = grad_loss(theta, ts, disc).reshape(3, 3)
    gp = grad_loss(theta.reshape(3, 3)[perm].ravel(), ts, disc).reshape(3, 3)
    np.testing.assert_allclose(gp, g[perm], rtol=1e-10, atol=1e-16)


# -- optimizers -----------------------------------------------------------------------------


def test_adam_first_step():
    opt = Adam(lr=0.1)
    theta = np.array([1.0, -2.0])
    g = np.array([0.5, -3.0])
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(opt.step(theta, 0.0, g), theta - 0.1 * np.sign(g), rtol=1e-7)


def test_gradient_descent_step():
    np.testing.assert_allclose(GradientDescent(0.5).step(np.ones(2), 0.0, np.array([2.0, 4.0])),
                               [0.0, -1.0])


def test_lbfgs_minimizes_ill_conditioned_quadratic():
    H = np.diag([1.0, 1e3])

    def fun(x):
        return 0.5 * x @ H @ x, H @ x

    opt, x = LBFGS(lr=0.1), np.array([1.0, 1.0])
    for _ in range(60):
        J, g = fun(x)
        x = opt.step(x, J, g, fun)
    assert np.linalg.norm(x) < 1e-8


def test_lbfgs_backtracks_over_failed_evaluations():
    calls = []

    def fun(x):
        calls.append(x.copy())
        if x[0] < -0.5:
            raise TrainingError("outside", x)
        return float((x[0] + 1) ** 2), np.array([2 * (x[0] + 1)])

    x = np.array([0.0])
    opt = LBFGS(lr=10.0, max_step=10.0)
    J, g = fun(x)
    new = opt.step(x, J, g, fun)
    assert -0.5 <= new[0] < 0.0


# -- train ----------------------------------------------------------------------------------


def test_self_labelled_stops_immediately():
    net = WeightNet(1, 2, "sigmoid")
    disc = advection_disc(net)
    theta = net.init_theta(0)
    ts = self_labelled(disc, theta, [0.2, 0.6])
    run = train(TrainingConfig(), ts, disc, theta)
    assert run.iterations == 0 and run.stop_reason == "tol" and run.final_loss <= 9e-7


@pytest.mark.parametrize("optimizer", ["adam", "gd", "lbfgs"])
def test_training_reduces_loss_and_is_deterministic(optimizer):
    b = get_benchmark("advection1d")
    disc = make_discretization(b, "1el")
    ts = b.training_set()
    cfg = TrainingConfig(optimizer=optimizer, lr=1e-2, max_iters=40, tol=1e-14)
    theta0 = disc.net.init_theta(cfg.seed)
    r1 = train(cfg, ts, disc, theta0)
    r2 = train(cfg, ts, make_discretization(b, "1el"), theta0)
    assert r1.final_loss <= r1.losses[0]
    assert np.array(r1.losses).tobytes() == np.array(r2.losses).tobytes()
    assert r1.theta.tobytes() == r2.theta.tobytes()
    assert r1.stop_reason in ("max_iters", "tol", "stationary", "no_progress")


def test_non_finite_loss_aborts_with_snapshot():
    class Broken:
        def forward(self, theta, lambdas):
            return np.full((len(lambdas), 1), np.nan), lambda G: np.zeros_like(theta)

        def qois(self, theta, lambdas):
            return self.forward(theta, lambdas)[0]

    with pytest.raises(TrainingError) as exc:
        train(TrainingConfig(), TrainingSet([0.5], [1.0]), Broken(), np.array([0.25]))
    np.testing.assert_array_equal(exc.value.theta, [0.25])


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        TrainingConfig(optimizer="sgd-nesterov").make_optimizer()


def test_restarts_use_fresh_seeds():
    b = get_benchmark("diffusion1d")
    disc = make_discretization(b, "vh4")
    cfg = TrainingConfig(optimizer="adam", max_iters=3, tol=1e-30, seed=10)
    run, seeds = train_with_restarts(cfg, b.training_set(), disc, max_restarts=2)
    assert seeds == [10, 11, 12]
    assert run.config.seed in seeds


def test_run_log_and_json(tmp_path):
    b = get_benchmark("advection1d")
    disc = make_discretization(b, "1el")
    run = train(TrainingConfig(max_iters=5, tol=0), b.training_set(), disc,
                disc.net.init_theta(0))
    run.write_log(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["iteration", "loss", "gradient_norm", "wall_time_ms"]
    assert len(rows) == 1 + len(run.losses)
    run.save(tmp_path / "run.json")
    data = json.loads((tmp_path / "run.json").read_text())
    assert data["stop_reason"] == "max_iters" and len(data["theta"]) == 15


# -- sweeps -------------------------------------------------------------------------------


def test_galerkin_sweep_relative_error():
    disc = diffusion_disc(WeightNet(1, 1, "exp"), x0=(0.1,))
    grid = np.linspace(0.01, 1, 100)
    rows = qoi_error_sweep(np.zeros(3), grid, disc, lambda l: [min(0.1, l)])
    rel = np.array([r[5] for r in rows])
    np.testing.assert_allclose(rel, np.where(grid >= 0.1, 1 - grid, 0.9), atol=1e-12)


def test_error_at_training_points_bounded_by_tolerance():
    b = get_benchmark("advection1d")
    disc = make_discretization(b, "2el")
    tol = 1e-5
    run = train(b.training_config("2el", tol=tol), b.training_set(), disc,
                disc.net.init_theta(42))
    assert run.converged
    rows = qoi_error_sweep(run.theta, b.training_lambdas(), disc, b.exact_oracle())
    assert max(r[4] for r in rows) <= np.sqrt(2 * tol)


def test_sweep_csv_format(tmp_path):
    rows = [(0.1, 0, 1 / 3, 0.25, 1 / 12, 1 / 3)]
    write_sweep_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "lambda,qoi_index,qoi_discrete,qoi_exact,abs_error,rel_error"
    assert lines[1] == "0.10000000000000001,0,0.33333333333333331,0.25,0.083333333333333329,0.33333333333333331"


def test_optimal_test_discretization_matches_closed_form():
    net = WeightNet(1, 1, "affine_sigmoid", [48.5, -9.0])
    disc = OptimalTestDiscretization([0.1], net)
    q = disc.qois(net.theta, [0.15])[0, 0]
    # relative error 0.575 % at this parameter
    assert abs(q - 0.1) / 0.1 == pytest.approx(0.005746, abs=5e-6)

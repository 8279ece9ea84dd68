"""Offline training of the weight network against QoI data.

The loss is

    J(theta) = 1/2 sum_i sum_k | q_k(u_h(lambda_i; theta)) - y_ik |^2

(or the same with each misfit divided by |y_ik| for ``kind="relative"``).
Only the Gram matrix A depends on theta. With r_i the residual
representative of sample i and  w_i = A^{-1} B S^{-1} Q^T g_i  the adjoint
for the QoI sensitivities g_i = dJ/dq_i, one has

    dJ/dA = - sum_i w_i r_i^T,

and since A is a quadrature sum of omega values, the gradient becomes a
quadrature sum of d omega / d theta against the pointwise product of the
FE functions w_i and r_i.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .assembly import GramAssembler, assemble_bilinear, assemble_load, assemble_qoi, AssembledSystem
from .solver import MixedFactorization, SolverError, _inverse_weight_integral, condense

LOSS_KINDS = ("absolute", "relative")


class TrainingError(RuntimeError):
    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else np.array(theta)


@dataclass
class TrainingSet:
    lambdas: np.ndarray
    values: np.ndarray  # (N, K) reference QoIs

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, float).ravel()
        self.values = np.asarray(self.values, float).reshape(len(self.lambdas), -1)
        if len(np.unique(self.lambdas)) != len(self.lambdas):
            raise ValueError("training parameters must be distinct")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("reference QoI values must be finite")

    def __len__(self):
        return len(self.lambdas)

    @classmethod
    def from_oracle(cls, lambdas, oracle):
        lambdas = np.asarray(lambdas, float)
        return cls(lambdas, np.array([np.atleast_1d(oracle(l)) for l in lambdas]))


# -- discretizations --------------------------------------------------------------


class MixedDiscretization:
    """Trial/test pairing for a problem, with the weight network architecture.

    Everything that does not depend on theta (B, Q, Gram element data, load
    vectors) is computed once.
    """

    def __init__(self, trial_space, test_space, problem, net):
        self.trial_space = trial_space
        self.test_space = test_space
        self.problem = problem
        self.net = net
        self.gram = GramAssembler(test_space, problem)
        self.B = assemble_bilinear(trial_space, test_space, problem)
        self.Q = np.array([assemble_qoi(trial_space, q) for q in problem.qois]).reshape(
            len(problem.qois), -1)
        self._loads = {}
        if self.B.shape[0] < self.B.shape[1]:
            raise ValueError("test space must be at least as large as the trial space")

    @property
    def m(self):
        return self.B.shape[0]

    @property
    def n(self):
        return self.B.shape[1]

    @property
    def qoi_count(self):
        return self.Q.shape[0]

    def load(self, lam):
        key = float(lam)
        if key not in self._loads:
            self._loads[key] = assemble_load(self.test_space, self.problem, key)
        return self._loads[key]

    def loads(self, lambdas):
        return np.column_stack([self.load(l) for l in lambdas])

    def gram_matrix(self, theta):
        om = self.net.weight(self.gram.flat_points, theta)
        return self.gram.assemble(om)

    def system(self, theta):
        return AssembledSystem(self.gram_matrix(theta), self.B, self.Q)

    def condensed(self, theta):
        return condense(self.system(theta), assemble_load=self.load,
                        lambda_domain=self.problem.lambda_domain)

    def solve(self, theta, lambdas):
        """Coefficients U (n, N) and residual representatives R (m, N)."""
        q, _, (U, R) = self._forward(theta, lambdas, need_grad=False)
        return U, R

    def qois(self, theta, lambdas):
        return self._forward(theta, lambdas, need_grad=False)[0]

    def forward(self, theta, lambdas):
        """QoIs (N, K) and a vector-Jacobian product G (N, K) -> dJ/dtheta."""
        q, vjp, _ = self._forward(theta, lambdas, need_grad=True)
        return q, vjp

    def _forward(self, theta, lambdas, need_grad):
        pts = self.gram.flat_points
        if need_grad:
            om, dom = self.net.weight_and_grad(pts, theta)
        else:
            om, dom = self.net.weight(pts, theta), None
        if not np.all(np.isfinite(om)):
            raise TrainingError("non-finite weight values", theta)
        A = self.gram.assemble(om)
        B, Q = self.B, self.Q
        L = self.loads(lambdas)
        f = MixedFactorization(A, B)
        sol = f.solve(L)
        U, R = sol.u, sol.r
        q = (Q @ U).T

        def vjp(G):
            W = f.adjoint(Q.T @ np.asarray(G, float).T)
            c = self.gram.contract(W, R)
            return -(c.ravel() @ dom)

        return q, vjp, (U, R)


class OptimalTestDiscretization:
    """1D point-load diffusion with trial psi(x) = x and the exact optimal test
    function phi = int_0^x 1/omega, giving u_h(x) = x phi(lambda) / phi(1).

    QoIs are point values at ``points``.
    """

    def __init__(self, points, net, panels=1024, lambda_domain=(0.0, 1.0)):
        self.points = np.atleast_1d(np.asarray(points, float))
        self.net = net
        self.panels = panels
        self.lambda_domain = lambda_domain

    @property
    def qoi_count(self):
        return len(self.points)

    def qois(self, theta, lambdas):
        return self.forward(theta, lambdas, need_grad=False)[0]

    def forward(self, theta, lambdas, need_grad=True):
        lam = np.asarray(lambdas, float)
        xs = np.concatenate([lam, [1.0]])
        phi, dphi = _inverse_weight_integral(self.net, theta, xs, self.panels, need_grad)
        ratio = phi[:-1] / phi[-1]
        q = ratio[:, None] * self.points[None, :]

        def vjp(G):
            G = np.asarray(G, float)
            gr = G @ self.points  # dJ/d ratio_i
            dratio = dphi[:-1] / phi[-1] - (phi[:-1] / phi[-1] ** 2)[:, None] * dphi[-1][None, :]
            return gr @ dratio

        return q, vjp


# -- loss -------------------------------------------------------------------------


def _scales(training_set, kind):
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    if kind == "absolute":
        return np.ones_like(training_set.values)
    y = np.abs(training_set.values)
    if np.any(y == 0):
        raise ValueError("relative loss needs nonzero reference values")
    return 1.0 / y


def loss_and_grad(theta, training_set, discretization, kind="absolute"):
    scale = _scales(training_set, kind)
    q, vjp = discretization.forward(theta, training_set.lambdas)
    e = (q - training_set.values) * scale
    J = 0.5 * float(np.sum(e * e))
    return J, vjp(e * scale)


def loss(theta, training_set, discretization, kind="absolute"):
    scale = _scales(training_set, kind)
    q = discretization.qois(theta, training_set.lambdas)
    e = (q - training_set.values) * scale
    return 0.5 * float(np.sum(e * e))


def grad_loss(theta, training_set, discretization, kind="absolute"):
    return loss_and_grad(theta, training_set, discretization, kind)[1]


# -- optimizers -------------------------------------------------------------------
#
# ``step(theta, J, grad, fun)`` returns the next iterate; ``fun(theta)`` gives
# (J, grad) and is only called by methods that need a line search.


class Adam:
    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta, J, grad, fun=None):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class GradientDescent:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, theta, J, grad, fun=None):
        return theta - self.lr * grad


class LBFGS:
    """Limited-memory BFGS with Armijo backtracking.

    Trial points where the loss cannot be evaluated (a factorization fails
    or the loss is not finite) are treated as a failed Armijo test. ``lr``
    is the length of the very first step and no step is longer than
    ``max_step``, which keeps saturating weights from collapsing to zero.
    """

    def __init__(self, lr=1e-2, memory=20, c1=1e-4, max_backtracks=60, max_step=1.0):
        self.lr, self.memory, self.c1, self.max_backtracks = lr, memory, c1, max_backtracks
        self.max_step = max_step
        self.s, self.y = [], []

    def _direction(self, grad):
        q = grad.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q *= (s @ y) / (y @ y)
        else:
            q *= self.lr / max(np.linalg.norm(grad), 1e-300)
        for (s, y), a in zip(zip(self.s, self.y), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        return -q

    def step(self, theta, J, grad, fun):
        for attempt in range(2):
            d = self._direction(grad)
            slope = d @ grad
            if slope >= 0 or attempt == 1:
                self.s, self.y = [], []
                d = self._direction(grad)
                slope = d @ grad
            trial = self._line_search(theta, J, grad, d, slope, fun)
            if trial is not None:
                return trial
            if not self.s:
                break
        self.s, self.y = [], []
        return theta

    def _line_search(self, theta, J, grad, d, slope, fun):
        t = min(1.0, self.max_step / max(np.linalg.norm(d), 1e-300))
        for _ in range(self.max_backtracks):
            trial = theta + t * d
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    Jt, gt = fun(trial)
            except (SolverError, TrainingError, FloatingPointError):
                Jt = np.inf
            if np.isfinite(Jt) and Jt <= J + self.c1 * t * slope:
                s, y = trial - theta, gt - grad
                if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                    self.s.append(s)
                    self.y.append(y)
                    if len(self.s) > self.memory:
                        self.s.pop(0)
                        self.y.pop(0)
                return trial
            t *= 0.5
        return None


OPTIMIZERS = {"adam": Adam, "gd": GradientDescent, "lbfgs": LBFGS}


@dataclass
class TrainingConfig:
    optimizer: str = "adam"
    lr: float = 1e-2
    max_iters: int = 10000
    tol: float = 9e-7
    seed: int = 42
    loss_kind: str = "absolute"
    grad_tol: float = 1e-12

    def make_optimizer(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return OPTIMIZERS[self.optimizer](lr=self.lr)


@dataclass
class TrainingRun:
    config: TrainingConfig
    theta: np.ndarray
    theta_initial: np.ndarray
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def final_loss(self):
        return min(self.losses)

    @property
    def iterations(self):
        return len(self.losses) - 1

    @property
    def converged(self):
        return self.stop_reason == "tol"

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "theta": [float(t) for t in self.theta],
            "theta_initial": [float(t) for t in self.theta_initial],
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "loss_history": [float(v) for v in self.losses],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_log(self, path):
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss", "gradient_norm", "wall_time_ms"])
            for i, (l, g, t) in enumerate(zip(self.losses, self.grad_norms, self.wall_ms)):
                w.writerow([i, f"{l:.17g}", f"{g:.17g}", f"{t:.3f}"])


def train(config, training_set, discretization, theta0, callback=None):
    """Minimize the loss from ``theta0``; returns the best iterate seen.

    Stops when J <= tol, the gradient norm drops below ``grad_tol``, after
    ``max_iters`` optimizer steps, or when a line search makes no progress.
    """
    cache = {}

    def fun(th):
        key = th.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = loss_and_grad(th, training_set, discretization, config.loss_kind)
        return cache[key]

    theta = np.array(theta0, float)
    opt = config.make_optimizer()
    run = TrainingRun(config, theta.copy(), theta.copy())
    best = np.inf
    start = time.perf_counter()
    for it in range(config.max_iters + 1):
        J, g = fun(theta)
        gnorm = float(np.linalg.norm(g))
        if not (np.isfinite(J) and np.isfinite(gnorm)):
            raise TrainingError(f"non-finite loss at iteration {it}", theta)
        run.losses.append(J)
        run.grad_norms.append(gnorm)
        run.wall_ms.append(1e3 * (time.perf_counter() - start))
        if J < best:
            best = J
            run.theta = theta.copy()
        if callback is not None:
            callback(it, J, gnorm)
        if J <= config.tol:
            run.stop_reason = "tol"
            break
        if gnorm < config.grad_tol:
            run.stop_reason = "stationary"
            break
        if it == config.max_iters:
            run.stop_reason = "max_iters"
            break
        new = opt.step(theta, J, g, fun)
        if np.array_equal(new, theta):
            run.stop_reason = "no_progress"
            break
        theta = new
    return run


def train_with_restarts(config, training_set, discretization, max_restarts=5, callback=None):
    """Train from ``init_theta(seed)``; when a run ends above tol, retry with
    seeds ``seed + 1, seed + 2, ...``. Returns (best run, seeds tried)."""
    best, seeds = None, []
    for k in range(max_restarts + 1):
        seed = config.seed + k
        seeds.append(seed)
        theta0 = discretization.net.init_theta(seed)
        run = train(replace(config, seed=seed), training_set, discretization, theta0, callback)
        if best is None or run.final_loss < best.final_loss:
            best = run
        if run.converged:
            break
    return best, seeds


# -- reporting --------------------------------------------------------------------

SWEEP_COLUMNS = ("lambda", "qoi_index", "qoi_discrete", "qoi_exact", "abs_error", "rel_error")


def qoi_error_sweep(theta, lambda_grid, discretization, exact_oracle):
    """Rows (lambda, qoi_index, discrete, exact, abs error, relative error)."""
    lam = np.asarray(lambda_grid, float)
    q = discretization.qois(theta, lam)
    rows = []
    for i, l in enumerate(lam):
        exact = np.atleast_1d(exact_oracle(l))
        for k in range(q.shape[1]):
            err = abs(q[i, k] - exact[k])
            rel = err / abs(exact[k]) if exact[k] != 0 else float("nan")
            rows.append((float(l), k, float(q[i, k]), float(exact[k]), float(err), float(rel)))
    return rows


def write_sweep_csv(rows, path):
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for l, k, qd, qe, ae, re in rows:
            w.writerow([f"{l:.17g}", k, f"{qd:.17g}", f"{qe:.17g}", f"{ae:.17g}", f"{re:.17g}"])

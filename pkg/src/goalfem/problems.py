"""Benchmark problems with closed-form solutions, and their discretizations.

Benchmark constants (QoI locations, parameter grids, meshes, network sizes,
tolerances) live in ``benchmarks.json`` next to this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .assembly import AverageQoI, DensityLoad, PointLoad, PointQoI, ProblemDefinition
from .mesh import build_interval_mesh, build_square_mesh
from .spaces import build_space
from .training import (MixedDiscretization, OptimalTestDiscretization, TrainingConfig,
                       TrainingSet)
from .weightnet import WeightNet

PI = np.pi


# -- exact solutions and loads ------------------------------------------------------


def diffusion_1d_solution(lam, x):
    """-u'' = delta_lam, u(0) = u'(1) = 0."""
    return np.minimum(np.asarray(x, float), lam)


def advection_1d_solution(lam, x):
    """u' = (x - lam) 1_[lam, 1], u(0) = 0."""
    d = np.asarray(x, float) - lam
    return np.where(d >= 0, 0.5 * d * d, 0.0)


def advection_1d_density(lam, x):
    d = np.asarray(x, float) - lam
    return np.where(d >= 0, d, 0.0)


def diffusion_2d_solution(lam, x):
    x = np.asarray(x, float)
    x1, x2 = x[..., 0], x[..., 1]
    return (np.sin(PI * x1) * np.sin(lam * PI * x1)
            * np.sin(PI * x2) * np.sin(lam * PI * x2))


def diffusion_2d_density(lam, x):
    x = np.asarray(x, float)
    s1, sl1 = np.sin(PI * x[..., 0]), np.sin(lam * PI * x[..., 0])
    s2, sl2 = np.sin(PI * x[..., 1]), np.sin(lam * PI * x[..., 1])
    c1, cl1 = np.cos(PI * x[..., 0]), np.cos(lam * PI * x[..., 0])
    c2, cl2 = np.cos(PI * x[..., 1]), np.cos(lam * PI * x[..., 1])
    return (2 * PI**2 * (1 + lam**2) * s1 * sl1 * s2 * sl2
            - 2 * lam * PI**2 * (c1 * cl1 * s2 * sl2 + s1 * sl1 * c2 * cl2))


def _sin_sin_integral(lam, a, b):
    """int_a^b sin(pi t) sin(lam pi t) dt."""

    def prim(t):
        out = 0.0
        for sign, k in ((1.0, 1.0 - lam), (-1.0, 1.0 + lam)):
            out += sign * (0.5 * t if k == 0 else 0.5 * np.sin(k * PI * t) / (k * PI))
        return out

    return prim(b) - prim(a)


def diffusion_2d_average(lam, lo, hi):
    """Closed-form mean of the exact 2D solution over the box [lo, hi]."""
    area = (hi[0] - lo[0]) * (hi[1] - lo[1])
    return _sin_sin_integral(lam, lo[0], hi[0]) * _sin_sin_integral(lam, lo[1], hi[1]) / area


def diffusion_2d_average_quadrature(lam, lo, hi, npts=20):
    """Tensor Gauss-Legendre mean of the exact solution over the box."""
    t, w = np.polynomial.legendre.leggauss(npts)
    xs = lo[0] + 0.5 * (hi[0] - lo[0]) * (t + 1)
    ys = lo[1] + 0.5 * (hi[1] - lo[1]) * (t + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vals = diffusion_2d_solution(lam, np.stack([X, Y], axis=-1))
    return float(0.25 * w @ vals @ w)


PROBLEM_KINDS = {
    "diffusion_1d": dict(load=PointLoad(), solution=diffusion_1d_solution),
    "advection_1d": dict(
        load=DensityLoad(advection_1d_density, breakpoints=lambda lam: [lam]),
        solution=advection_1d_solution),
    "diffusion_2d": dict(load=DensityLoad(diffusion_2d_density), solution=diffusion_2d_solution),
}


def _make_qoi(spec):
    if spec["kind"] == "point":
        return PointQoI(float(spec["x0"]))
    if spec["kind"] == "average":
        return AverageQoI(tuple(spec["lo"]), tuple(spec["hi"]))
    raise ValueError(f"unknown QoI kind {spec['kind']!r}")


def make_problem(kind, qoi_specs, lambda_domain=(0.0, 1.0), name=""):
    if kind not in PROBLEM_KINDS:
        raise ValueError(f"unknown problem kind {kind!r}")
    entry = PROBLEM_KINDS[kind]
    return ProblemDefinition(kind, entry["load"], [_make_qoi(q) for q in qoi_specs],
                             exact_solution=entry["solution"],
                             lambda_domain=tuple(lambda_domain), name=name)


# -- benchmarks -----------------------------------------------------------------------


@dataclass
class Benchmark:
    id: str
    title: str
    problem: ProblemDefinition
    net_spec: dict
    training: dict
    variants: list
    sweep_points: int = 101
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def input_dim(self):
        return self.problem.dim

    def variant(self, name=None):
        if name is None:
            return self.variants[0]
        for v in self.variants:
            if v["name"] == name:
                return v
        raise KeyError(f"benchmark {self.id!r} has no variant {name!r}; "
                       f"choose from {[v['name'] for v in self.variants]}")

    def make_net(self, theta=None):
        return WeightNet(self.input_dim, int(self.net_spec["neurons"]),
                         self.net_spec["g_kind"], theta)

    def training_lambdas(self):
        return np.array(self.training["lambdas"], float)

    def training_set(self):
        return TrainingSet.from_oracle(self.training_lambdas(), lambda l: exact_qoi(self, l))

    def training_config(self, variant=None, **overrides):
        v = self.variant(variant)
        t = self.training
        cfg = TrainingConfig(
            optimizer=t.get("optimizer", "adam"),
            lr=float(v.get("lr", t.get("lr", 1e-2))),
            max_iters=int(v.get("max_iters", t.get("max_iters", 10000))),
            tol=float(v.get("tol", t.get("tol", 9e-7))),
            loss_kind=v.get("loss", t.get("loss", "absolute")),
        )
        for k, val in overrides.items():
            if val is not None:
                setattr(cfg, k, val)
        return cfg

    def sweep_grid(self, count=None):
        a, b = self.problem.lambda_domain
        return np.linspace(a, b, self.sweep_points if count is None else count)

    def exact_oracle(self):
        return lambda lam: exact_qoi(self, lam)


def _build_mesh(spec, dim):
    m = spec["mesh"]
    if dim == 1:
        return build_interval_mesh(int(m["n"]), *m.get("interval", (0.0, 1.0)))
    return build_square_mesh(int(m["n"]), m.get("split", "crisscross"), m.get("ny"))


def build_variant_space(benchmark, spec):
    dim = benchmark.problem.dim
    return build_space(_build_mesh(spec, dim), int(spec.get("degree", 1)), spec.get("bc", "none"))


def make_discretization(benchmark, variant=None, net=None):
    """Discretization object for a benchmark variant (see ``training``)."""
    v = benchmark.variant(variant)
    net = benchmark.make_net() if net is None else net
    if v.get("discretization") == "optimal_test_1d":
        if benchmark.problem.form_kind != "diffusion_1d":
            raise ValueError("optimal test functions are only available for diffusion_1d")
        pts = [q.x0 for q in benchmark.problem.qois]
        return OptimalTestDiscretization(pts, net, lambda_domain=benchmark.problem.lambda_domain)
    trial = build_variant_space(benchmark, v["trial"])
    test = build_variant_space(benchmark, v["test"])
    return MixedDiscretization(trial, test, benchmark.problem, net)


def benchmark_from_dict(bid, data):
    problem = make_problem(data["problem"], data["qois"], data.get("lambda_domain", (0.0, 1.0)),
                           name=bid)
    return Benchmark(bid, data.get("title", bid), problem, data["net"], data["training"],
                     data["variants"], int(data.get("sweep_points", 101)), raw=data)


def load_config(path=None):
    if path is None:
        text = resources.files("goalfem").joinpath("benchmarks.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def benchmark_catalog(path=None):
    return [benchmark_from_dict(k, v) for k, v in load_config(path).items()]


def get_benchmark(bid, path=None):
    for b in benchmark_catalog(path):
        if b.id == bid:
            return b
    raise KeyError(f"unknown benchmark {bid!r}")


def exact_solution(benchmark, lam, x):
    return benchmark.problem.exact_solution(lam, x)


def exact_qoi(benchmark, lam):
    """Exact QoI values (one per functional) for parameter ``lam``."""
    problem = benchmark.problem if isinstance(benchmark, Benchmark) else benchmark
    out = []
    for q in problem.qois:
        if isinstance(q, PointQoI):
            out.append(float(problem.exact_solution(lam, q.x0)))
        elif problem.form_kind == "diffusion_2d":
            out.append(float(diffusion_2d_average(lam, q.lo, q.hi)))
        else:
            raise ValueError(f"no exact QoI available for {q!r}")
    return np.array(out)


def fine_mesh_oracle(problem, n=1024):
    """Reference QoIs from an unweighted fine-mesh solve, for problems
    without closed forms.

    1D uses P1 trial functions on ``n`` elements and a test space on
    ``2 n`` elements; 2D uses P2 on a ``n x n`` diagonal mesh (Galerkin).
    """
    from .assembly import assemble_load
    dim = problem.dim
    if dim == 1:
        trial_bc = "left_dirichlet"
        test_bc = "none" if problem.form_kind == "advection_1d" else "left_dirichlet"
        trial = build_space(build_interval_mesh(n), 1, trial_bc)
        test = build_space(build_interval_mesh(2 * n), 1, test_bc)
    else:
        trial = build_space(build_square_mesh(n, "diagonal"), 2, "full_dirichlet")
        test = trial
    net = WeightNet(dim, 1, "exp")  # omega == 1
    disc = MixedDiscretization(trial, test, problem, net)
    op = disc.condensed(net.theta)

    def oracle(lam):
        return op.qoi_from_load(assemble_load(test, problem, lam))

    return oracle

"""Single-hidden-layer networks defining a positive weight function.

The network is

    ANN(x; theta) = sum_j  c_j * sigmoid(w_j . x + b_j)

with parameters stored per neuron as ``(w_j1, ..., w_jd, b_j, c_j)``. The
weight is ``omega(x) = g(ANN(x))`` with ``g`` one of

* ``exp``: omega = exp(ANN), equal to 1 at theta = 0;
* ``sigmoid``: omega = sigmoid(ANN), values in (0, 1);
* ``affine_sigmoid``: a single neuron whose output weight is fixed to 1,
  so omega = sigmoid(w . x + b). Only ``(w, b)`` are trainable and
  ``ann_eval`` returns the affine pre-activation.

``exp(ANN)`` is unbounded as a function of theta but bounded on the compact
domain for any fixed finite theta, which is all the norm equivalence needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

G_KINDS = ("exp", "sigmoid", "affine_sigmoid")


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True, eq=False)
class WeightNet:
    input_dim: int
    neuron_count: int
    g_kind: str = "exp"
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.input_dim not in (1, 2):
            raise ValueError(f"input_dim must be 1 or 2, got {self.input_dim!r}")
        if self.neuron_count < 1:
            raise ValueError("neuron_count must be positive")
        if self.g_kind not in G_KINDS:
            raise ValueError(f"unknown g_kind {self.g_kind!r}")
        if self.g_kind == "affine_sigmoid" and self.neuron_count != 1:
            raise ValueError("affine_sigmoid nets have exactly one neuron")
        theta = np.zeros(self.num_params) if self.theta is None else self.theta
        theta = np.array(theta, dtype=float).ravel()
        if theta.shape != (self.num_params,):
            raise ValueError(
                f"expected {self.num_params} parameters, got {theta.size}"
            )
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def per_neuron(self):
        return self.input_dim + (1 if self.g_kind == "affine_sigmoid" else 2)

    @property
    def num_params(self):
        return self.neuron_count * self.per_neuron

    def with_theta(self, theta):
        return replace(self, theta=np.asarray(theta, float))

    def init_theta(self, seed):
        """I.i.d. uniform draws on [-0.5, 0.5]."""
        rng = np.random.default_rng(seed)
        return rng.uniform(-0.5, 0.5, self.num_params)

    def _unpack(self, theta):
        t = np.asarray(theta, float).reshape(self.neuron_count, self.per_neuron)
        d = self.input_dim
        out = np.ones(self.neuron_count) if self.g_kind == "affine_sigmoid" else t[:, d + 1]
        return t[:, :d], t[:, d], out

    def _points(self, x):
        x = np.asarray(x, float)
        if self.input_dim == 1:
            if x.ndim == 2 and x.shape[1] != 1:
                raise ValueError(f"expected 1-d points, got shape {x.shape}")
            return x.reshape(-1, 1), x.shape[:-1] if x.ndim == 2 else x.shape
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim}-d points, got shape {x.shape}")
        return x.reshape(-1, self.input_dim), x.shape[:-1]

    def _forward(self, x, theta):
        pts, shape = self._points(x)
        w, b, c = self._unpack(self.theta if theta is None else theta)
        z = pts @ w.T + b  # (P, N)
        if self.g_kind == "affine_sigmoid":
            return pts, shape, z, None, z[:, 0]
        s = sigmoid(z)
        return pts, shape, z, s, s @ c

    def ann(self, x, theta=None):
        _, shape, _, _, a = self._forward(x, theta)
        return a.reshape(shape)

    def weight(self, x, theta=None):
        _, shape, _, _, a = self._forward(x, theta)
        return self._g(a).reshape(shape)

    def _g(self, a):
        return np.exp(a) if self.g_kind == "exp" else sigmoid(a)

    def weight_and_grad(self, x, theta=None):
        """omega(x) with shape (P,) and d omega / d theta with shape (P, num_params)."""
        pts, shape, z, s, a = self._forward(x, theta)
        om = self._g(a)
        dg = om if self.g_kind == "exp" else om * (1.0 - om)
        return om.reshape(shape), dg[:, None] * self._ann_grad(pts, s, theta)

    def ann_grad(self, x, theta=None):
        """d ANN / d theta, shape (P, num_params)."""
        pts, _, _, s, _ = self._forward(x, theta)
        return self._ann_grad(pts, s, theta)

    def _ann_grad(self, pts, s, theta):
        if self.g_kind == "affine_sigmoid":
            return np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        _, _, c = self._unpack(self.theta if theta is None else theta)
        P, d, N = len(pts), self.input_dim, self.neuron_count
        ds = s * (1.0 - s) * c  # d ANN / d z_j
        out = np.empty((P, N, d + 2))
        out[:, :, :d] = ds[:, :, None] * pts[:, None, :]
        out[:, :, d] = ds
        out[:, :, d + 1] = s
        return out.reshape(P, -1)

    # -- persistence ----------------------------------------------------------

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "neuron_count": self.neuron_count,
            "g_kind": self.g_kind,
            "theta": [float(t) for t in self.theta],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            int(data["input_dim"]),
            int(data["neuron_count"]),
            data["g_kind"],
            np.array(data["theta"], float),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def ann_eval(net, x):
    return net.ann(x)


def weight_eval(net, x):
    return net.weight(x)


def grad_theta(net, x):
    """Gradient of omega(x) with respect to theta (chain rule through g)."""
    return net.weight_and_grad(x)[1]

"""Quasi-LPV models with softmax scheduling, observer, simulation and fitting loss.

The model is

    x+ = A(p(x)) x + B(p(x)) u,    y = C x,
    p(x) = softmax(N(x; theta_1), ..., N(x; theta_np)),

with A(p) = sum_i p_i A_i (same for B and the observer gain L). The
numerics are written with ``jax.numpy`` so that the fitting loss can be
differentiated in reverse mode through the whole unrolled simulation; the
public functions return plain numpy arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

FORMAT_VERSION = 1
DIVERGENCE_NORM = 1e9
SIMPLEX_TOL = 1e-9


class SimulationDivergence(RuntimeError):
    pass


def elu1(x):
    """elu(x) + 1: positive and monotonically increasing."""
    return jax.nn.elu(x) + 1.0


ACTIVATIONS = {"elu+1": elu1}


@partial(jax.tree_util.register_dataclass,
         data_fields=["weights", "biases"], meta_fields=["activation"])
@dataclass(frozen=True)
class SchedulingNet:
    """n_p independent feedforward networks stacked along the leading axis.

    weights[k] has shape (n_p, out_k, in_k) and biases[k] (n_p, out_k); the
    last layer has out = 1 and no activation.
    """

    weights: tuple
    biases: tuple
    activation: str = "elu+1"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_p(self):
        return self.weights[0].shape[0]

    def check(self, nx):
        fan_in = nx
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != self.n_p or W.shape[2] != fan_in or b.shape != W.shape[:2]:
                raise ValueError("scheduling network layer dimensions do not chain")
            fan_in = W.shape[1]
        if fan_in != 1:
            raise ValueError("scheduling network must end with a scalar output")


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class QlpvModel:
    A: jnp.ndarray  # (n_p, nx, nx)
    B: jnp.ndarray  # (n_p, nx, nu)
    C: jnp.ndarray  # (ny, nx)
    L: jnp.ndarray  # (n_p, nx, ny)
    net: SchedulingNet

    @property
    def n_p(self):
        return self.A.shape[0]

    @property
    def nx(self):
        return self.A.shape[1]

    @property
    def nu(self):
        return self.B.shape[2]

    @property
    def ny(self):
        return self.C.shape[0]

    def check(self):
        n_p, nx = self.n_p, self.nx
        if self.A.shape != (n_p, nx, nx):
            raise ValueError(f"A has shape {self.A.shape}")
        if self.B.shape[:2] != (n_p, nx):
            raise ValueError(f"B has shape {self.B.shape}")
        if self.C.shape[1] != nx:
            raise ValueError(f"C has shape {self.C.shape}")
        if self.L.shape != (n_p, nx, self.ny):
            raise ValueError(f"L has shape {self.L.shape}")
        if self.net.n_p != n_p:
            raise ValueError("scheduling network and vertex lists disagree on n_p")
        self.net.check(nx)
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_numpy(self):
        return jax.tree_util.tree_map(np.asarray, self)

    def to_dict(self):
        m = self.to_numpy()
        return {
            "format_version": FORMAT_VERSION,
            "dims": {"n_x": m.nx, "n_u": m.nu, "n_y": m.ny, "n_p": m.n_p,
                     "layers": [list(W.shape[1:]) for W in m.net.weights]},
            "activation": m.net.activation,
            "A": m.A.tolist(), "B": m.B.tolist(), "C": m.C.tolist(), "L": m.L.tolist(),
            "weights": [W.tolist() for W in m.net.weights],
            "biases": [b.tolist() for b in m.net.biases],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        arr = partial(np.asarray, dtype=float)
        net = SchedulingNet(tuple(arr(W) for W in d["weights"]),
                            tuple(arr(b) for b in d["biases"]), d["activation"])
        dims = d["dims"]
        m = cls(arr(d["A"]).reshape(dims["n_p"], dims["n_x"], dims["n_x"]),
                arr(d["B"]).reshape(dims["n_p"], dims["n_x"], dims["n_u"]),
                arr(d["C"]).reshape(dims["n_y"], dims["n_x"]),
                arr(d["L"]).reshape(dims["n_p"], dims["n_x"], dims["n_y"]), net)
        return m.check()


@dataclass
class IoDataset:
    u: np.ndarray  # (N, nu)
    y: np.ndarray  # (N, ny)
    dt: float = 1.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.u), -1)
        self.y = np.asarray(self.y, dtype=float).reshape(len(self.y), -1)
        if len(self.u) != len(self.y):
            raise ValueError(f"u has {len(self.u)} samples but y has {len(self.y)}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return len(self.u)


def init_model(nx, nu, ny, n_p, hidden=(3,), seed=0, a_scale=0.5, activation="elu+1"):
    rng = np.random.default_rng(seed)
    A = np.tile(a_scale * np.eye(nx), (n_p, 1, 1)) + 0.1 * rng.standard_normal((n_p, nx, nx))
    B = 0.1 * rng.standard_normal((n_p, nx, nu))
    C = 0.1 * rng.standard_normal((ny, nx))
    L = np.zeros((n_p, nx, ny))
    sizes = [nx, *hidden, 1]
    Ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        Ws.append(rng.standard_normal((n_p, fan_out, fan_in)) / np.sqrt(fan_in))
        bs.append(np.zeros((n_p, fan_out)))
    return QlpvModel(A, B, C, L, SchedulingNet(tuple(Ws), tuple(bs), activation)).check()


# -- traced primitives (no validation; usable under jit/grad) --------------

def net_logits(net: SchedulingNet, x):
    act = ACTIVATIONS[net.activation]
    h = jnp.broadcast_to(x, (net.n_p, x.shape[-1]))
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = jnp.einsum("poi,pi->po", W, h) + b
        if k < last:
            h = act(h)
    return h[:, 0]


def softmax(z):
    e = jnp.exp(z - jnp.max(z))
    return e / jnp.sum(e)


def sched(model, x):
    return softmax(net_logits(model.net, x))


def blend_(mats, p):
    return jnp.tensordot(p, mats, axes=1)


def step_(model, x, u):
    p = sched(model, x)
    return blend_(model.A, p) @ x + blend_(model.B, p) @ u


def obs_step_(model, z, u, y):
    p = sched(model, z)
    w = y - model.C @ z
    return blend_(model.A, p) @ z + blend_(model.B, p) @ u + blend_(model.L, p) @ w


def simulate_(model, x0, U):
    def body(x, u):
        return step_(model, x, u), x
    xN, X = jax.lax.scan(body, x0, U)
    return jnp.vstack([X, xN[None]])


def observe_(model, z0, U, Y):
    """Observer run; returns (Z of length N+1, residuals w_t = y_t - C z_t)."""
    def body(z, uy):
        u, y = uy
        return obs_step_(model, z, u, y), (z, y - model.C @ z)
    zN, (Z, Wr) = jax.lax.scan(body, z0, (U, Y))
    return jnp.vstack([Z, zN[None]]), Wr


def fit_loss_(model, x0, U, Y):
    X = simulate_(model, x0, U)
    E = Y - X[:-1] @ model.C.T
    return jnp.sum(E ** 2) / Y.shape[0]


_simulate_jit = jax.jit(simulate_)
_observe_jit = jax.jit(observe_)
_fit_loss_jit = jax.jit(fit_loss_)
_fit_grad_jit = jax.jit(jax.value_and_grad(fit_loss_, argnums=(0, 1)))


# -- public API -------------------------------------------------------------

def scheduling(model: QlpvModel, x) -> np.ndarray:
    logits = np.asarray(net_logits(model.net, jnp.asarray(x, dtype=float)))
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError(f"scheduling network produced non-finite output {logits}")
    return np.asarray(softmax(logits))


def blend(matrices, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"p = {p} is not in the probability simplex")
    return np.tensordot(p, np.asarray(matrices), axes=1)


def _finite(v, what):
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite {what}")
    return v


def model_step(model: QlpvModel, x, u) -> np.ndarray:
    x = jnp.asarray(_finite(x, "state"), dtype=float)
    u = jnp.atleast_1d(jnp.asarray(_finite(u, "input"), dtype=float))
    return _finite(step_(model, x, u), "successor state")


def observer_step(model: QlpvModel, z, u, y) -> np.ndarray:
    z = jnp.asarray(_finite(z, "observer state"), dtype=float)
    u = jnp.atleast_1d(jnp.asarray(_finite(u, "input"), dtype=float))
    y = jnp.atleast_1d(jnp.asarray(_finite(y, "output"), dtype=float))
    return _finite(obs_step_(model, z, u, y), "observer successor")


def _guard(X, what):
    norms = np.linalg.norm(X, axis=1)
    bad = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)
    if bad.any():
        t = int(np.argmax(bad))
        raise SimulationDivergence(f"{what} diverged at step {t} (|x| = {norms[t]:.3g})")


def simulate(model: QlpvModel, x0, u_seq):
    """Open-loop simulation; returns (x_traj with N+1 rows, y_hat with N rows)."""
    U = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
    x0 = _finite(np.asarray(x0, dtype=float), "initial state")
    _finite(U, "input sequence")
    X = np.asarray(_simulate_jit(model, jnp.asarray(x0), jnp.asarray(U)))
    _guard(X, "simulation")
    return X, X[:-1] @ np.asarray(model.C).T


def observe(model: QlpvModel, data: IoDataset, z0=None):
    """Run the observer over a dataset; returns (Z, residuals w_t)."""
    z0 = np.zeros(model.nx) if z0 is None else np.asarray(z0, dtype=float)
    Z, Wr = _observe_jit(model, jnp.asarray(z0), jnp.asarray(data.u), jnp.asarray(data.y))
    Z = np.asarray(Z)
    _guard(Z, "observer")
    return Z, np.asarray(Wr)


def fit_loss(model: QlpvModel, x0, data: IoDataset) -> float:
    X, Yhat = simulate(model, x0, data.u)
    return float(np.sum((data.y - Yhat) ** 2) / len(data))


def fit_gradients(model: QlpvModel, x0, data: IoDataset):
    """Return (loss, d loss/d model, d loss/d x0) by reverse mode through the rollout."""
    simulate(model, x0, data.u)  # divergence guard with diagnostics
    val, (gm, gx0) = _fit_grad_jit(model, jnp.asarray(x0, dtype=float),
                                   jnp.asarray(data.u), jnp.asarray(data.y))
    return float(val), gm.to_numpy(), np.asarray(gx0)


def bfr(y_true, y_pred) -> float:
    """Best fit rate in percent, averaged over output channels, clipped at 0."""
    yt = np.asarray(y_true, dtype=float)
    yp = np.asarray(y_pred, dtype=float)
    yt = yt.reshape(len(yt), -1)
    yp = yp.reshape(len(yp), -1)
    if yt.shape != yp.shape or len(yt) < 2:
        raise ValueError("bfr needs two equally shaped sequences with at least 2 samples")
    den = np.linalg.norm(yt - yt.mean(axis=0), axis=0)
    if np.any(den == 0):
        raise ValueError("bfr undefined for a constant reference signal")
    scores = 100.0 * (1.0 - np.linalg.norm(yt - yp, axis=0) / den)
    return float(np.mean(np.maximum(scores, 0.0)))

"""A small numpy MLP velocity field trained by flow matching.

Forward and backward passes are written out by hand; :func:`grad` is checked
against central finite differences in the test-suite.

Checkpoint layout (little-endian, stable)::

    8 bytes   magic  b"SGFLMLP1"
    uint32    activation code (0 = tanh)
    uint32    L, number of layer widths
    L uint32  widths  (input = d + 1 + m, ..., output = d)
    then for each of the L-1 layers, float64 values:
              W  (out x in, row-major), followed by b (out)
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DivergenceError, DomainError
from .fields import DEFAULT_T_MIN, GaussianMixtureField, GaussianMixtureTarget, VelocityField

log = logging.getLogger(__name__)

MAGIC = b"SGFLMLP1"
ACTIVATIONS = {"tanh": 0}


class MLPField(VelocityField):
    """Velocity field ``v(x, t, c) = MLP([x, t, c])`` with tanh hidden layers."""

    def __init__(self, widths, params=None, rng=None, activation: str = "tanh"):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise DomainError(f"invalid layer widths {self.widths}")
        if activation not in ACTIVATIONS:
            raise DomainError(f"unsupported activation {activation!r}")
        self.activation = activation
        self.dim = self.widths[-1]
        self.cond_dim = self.widths[0] - self.dim - 1
        if self.cond_dim < 0:
            raise DomainError("input width must be at least output width + 1")
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = []
            for fan_in, fan_out in zip(self.widths, self.widths[1:]):
                W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(1.0 / fan_in)
                params.append((W, np.zeros(fan_out)))
        self.params = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in params]

    @classmethod
    def create(cls, dim: int, cond_dim: int, hidden=(64, 64), seed: int = 0) -> "MLPField":
        return cls((dim + 1 + cond_dim, *hidden, dim), rng=np.random.default_rng(seed))

    def copy(self) -> "MLPField":
        return MLPField(self.widths, [(W.copy(), b.copy()) for W, b in self.params], activation=self.activation)

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.params])

    def set_flat(self, theta) -> None:
        pos = 0
        for i, (W, b) in enumerate(self.params):
            nw, nb = W.size, b.size
            self.params[i] = (np.asarray(theta[pos:pos + nw], dtype=np.float64).reshape(W.shape).copy(),
                              np.asarray(theta[pos + nw:pos + nw + nb], dtype=np.float64).copy())
            pos += nw + nb

    def inputs(self, xs, t, cs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        n = xs.shape[0]
        ts = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        cs = np.broadcast_to(np.asarray(cs, dtype=np.float64).reshape(-1, self.cond_dim) if self.cond_dim
                             else np.zeros((n, 0)), (n, self.cond_dim))
        return np.concatenate([xs, ts, cs], axis=1)

    def forward(self, z):
        """Returns the output and the per-layer activations needed by :meth:`backward`."""
        acts = [z]
        h = z
        last = len(self.params) - 1
        for i, (W, b) in enumerate(self.params):
            h = h @ W.T + b
            if i != last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        grads = [None] * len(self.params)
        delta = dout
        for i in range(len(self.params) - 1, -1, -1):
            W, _ = self.params[i]
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
            if i:
                delta = (delta @ W) * (1.0 - acts[i] ** 2)
        return grads

    def evaluate_batch(self, xs, t, cs):
        return self.forward(self.inputs(xs, t, cs))[0]

    def evaluate(self, x, t, c):
        return self.evaluate_batch(np.asarray(x, dtype=np.float64)[None, :], t,
                                   np.asarray(c, dtype=np.float64)[None, :])[0]


@dataclass(frozen=True, eq=False)
class Batch:
    """Flow-matching batch: clean samples, noise, times and conditions (row-aligned)."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    c: np.ndarray

    @property
    def xt(self) -> np.ndarray:
        return (1.0 - self.t)[:, None] * self.x0 + self.t[:, None] * self.eps

    @property
    def target(self) -> np.ndarray:
        return self.eps - self.x0

    def __len__(self) -> int:
        return self.x0.shape[0]


def _predict(field: VelocityField, xt, t, c) -> np.ndarray:
    if isinstance(field, MLPField):
        return field.evaluate_batch(xt, t, c)  # per-row times are fine here
    return np.stack([field.evaluate(xt[i], float(t[i]), c[i]) for i in range(len(t))])


def fm_loss(field: VelocityField, batch: Batch) -> float:
    """Mean over the batch of ``||(eps - x0) - field(x_t, t, c)||^2``."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    pred = _predict(field, batch.xt, batch.t, batch.c)
    return float(np.mean(np.sum((batch.target - pred) ** 2, axis=1)))


def loss_and_grad(field: MLPField, batch: Batch):
    if len(batch) == 0:
        raise DomainError("empty batch")
    out, acts = field.forward(field.inputs(batch.xt, batch.t, batch.c))
    resid = out - batch.target
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    return loss, field.backward(acts, 2.0 * resid / len(batch))


def grad(field: MLPField, batch: Batch):
    """Exact gradients of :func:`fm_loss`, as a list of ``(dW, db)`` per layer."""
    return loss_and_grad(field, batch)[1]


def sample_batch(target: GaussianMixtureTarget, rng: np.random.Generator, n: int,
                 t_min: float = DEFAULT_T_MIN, cond_scale: float = 1.0) -> Batch:
    """Conditions uniform in ``[-cond_scale, cond_scale]^m``, times uniform in ``[t_min, 1]``."""
    m = target.cond_dim
    c = rng.uniform(-cond_scale, cond_scale, size=(n, m))
    t = rng.uniform(t_min, 1.0, size=n)
    comp = rng.choice(target.n_components, size=n, p=target.weights)
    x0 = target.means[comp] + c @ target.condition_map.T + np.sqrt(target.variances[comp]) * \
        rng.standard_normal((n, target.dim))
    eps = rng.standard_normal((n, target.dim))
    return Batch(x0, eps, t, c)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    steps: int = 5000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple = (64, 64)
    t_min: float = DEFAULT_T_MIN
    cond_scale: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or not self.learning_rate > 0:
            raise DomainError("batch_size and learning_rate must be positive, steps >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def update(self, theta, g):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _flat_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def train(target: GaussianMixtureTarget, cfg: TrainConfig, field: MLPField | None = None):
    """Fit an :class:`MLPField` to ``target`` by flow matching.

    Returns ``(field, losses)`` where ``losses[i]`` is the minibatch loss at
    step ``i``. Raises :class:`DivergenceError` on a non-finite loss.
    """
    rng = np.random.default_rng(cfg.seed)
    if field is None:
        field = MLPField.create(target.dim, target.cond_dim, cfg.hidden, seed=cfg.seed)
    opt = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    theta = field.flat()
    losses = []
    for step in range(cfg.steps):
        batch = sample_batch(target, rng, cfg.batch_size, cfg.t_min, cfg.cond_scale)
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are caught below
            loss, grads = loss_and_grad(field, batch)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        g = _flat_grads(grads)
        theta = opt.update(theta, g) if opt is not None else theta - cfg.learning_rate * g
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(step, float("nan"))
        field.set_flat(theta)
        losses.append(loss)
    return field, np.array(losses)


def conditional_variance_floor(target: GaussianMixtureTarget, batch: Batch, t_min: float = DEFAULT_T_MIN) -> float:
    """Monte Carlo estimate of the irreducible loss: :func:`fm_loss` of the exact field on ``batch``."""
    return fm_loss(GaussianMixtureField(target, t_min), batch)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(field: MLPField, path) -> None:
    parts = [MAGIC, struct.pack("<II", ACTIVATIONS[field.activation], len(field.widths)),
             struct.pack(f"<{len(field.widths)}I", *field.widths)]
    for W, b in field.params:
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MLPField:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(path, f"cannot read ({exc.strerror})") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(path, "bad magic; not a segflow MLP checkpoint")
    try:
        act_code, n_widths = struct.unpack_from("<II", raw, 8)
        widths = struct.unpack_from(f"<{n_widths}I", raw, 16)
    except struct.error:
        raise CheckpointError(path, "truncated header") from None
    activation = {v: k for k, v in ACTIVATIONS.items()}.get(act_code)
    if activation is None:
        raise CheckpointError(path, f"unknown activation code {act_code}")
    pos = 16 + 4 * n_widths
    expected = pos + 8 * sum(o * i + o for i, o in zip(widths, widths[1:]))
    if len(raw) != expected:
        raise CheckpointError(path, f"size {len(raw)} bytes, expected {expected}")
    params = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        W = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=pos).reshape(fan_out, fan_in)
        pos += 8 * W.size
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        params.append((W.astype(np.float64), b.astype(np.float64)))
    field = MLPField(widths, params, activation=activation)
    if not np.all(np.isfinite(field.flat())):
        raise CheckpointError(path, "non-finite parameters")
    return field

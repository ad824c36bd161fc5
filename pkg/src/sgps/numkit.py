"""Dense vector kernels, seeded RNG substreams and the trainable embedding MLP."""

from __future__ import annotations

import io
import zlib
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate (e.g. a zero vector where a direction is needed)."""


def l2_normalize(v, eps=EPS):
    """Scale ``v`` (or each row of a 2-D array) to unit L2 norm.

    Vectors with norm below ``eps`` are divided by ``eps`` instead, so the zero
    vector maps to itself.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def cosine_sim(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    # product of norms is commutative, so the result is exactly symmetric
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(x):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x)
    return float(m + np.log(np.sum(np.exp(x - m))))


class Rng:
    """Seeded random source that can be split into independent named substreams.

    ``Rng(7).child("centers")`` always yields the same stream regardless of how
    much the parent has been consumed.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name):
        return Rng(self.seed, self._key + (zlib.crc32(str(name).encode("utf-8")),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"

    # thin delegation so callers rarely need ``.generator``
    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)

    def random(self, *args, **kwargs):
        return self.generator.random(*args, **kwargs)

    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)

    def permutation(self, *args, **kwargs):
        return self.generator.permutation(*args, **kwargs)


_ACTIVATIONS = ("tanh", "identity")


@dataclass
class EmbeddingNet:
    """Two-layer perceptron ``x -> l2_normalize(W2 act(W1 x + b1) + b2)``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"
    param_names: tuple = field(default=("W1", "b1", "W2", "b2"), init=False, repr=False)

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W1 = np.array(self.W1, dtype=np.float64)
        self.b1 = np.array(self.b1, dtype=np.float64)
        self.W2 = np.array(self.W2, dtype=np.float64)
        self.b2 = np.array(self.b2, dtype=np.float64)
        h, d_in = self.W1.shape
        d, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (d,):
            raise DimensionError("inconsistent layer shapes")

    @classmethod
    def init(cls, d_in=32, hidden=64, d_out=16, rng=None, activation="tanh"):
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        rng = rng if rng is not None else Rng(0)
        g = rng.child("net_init")
        a1 = 1.0 / np.sqrt(d_in)
        a2 = 1.0 / np.sqrt(hidden)
        return cls(
            W1=g.uniform(-a1, a1, size=(hidden, d_in)),
            b1=np.zeros(hidden),
            W2=g.uniform(-a2, a2, size=(d_out, hidden)),
            b2=np.zeros(d_out),
            activation=activation,
        )

    @property
    def d_in(self):
        return self.W1.shape[1]

    @property
    def hidden(self):
        return self.W1.shape[0]

    @property
    def d_out(self):
        return self.W2.shape[0]

    @property
    def n_params(self):
        return sum(getattr(self, n).size for n in self.param_names)

    def params(self):
        return {n: getattr(self, n) for n in self.param_names}

    def copy(self):
        return EmbeddingNet(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.activation)

    def _act(self, a):
        return np.tanh(a) if self.activation == "tanh" else a

    def _act_grad(self, h):
        # expressed through the activation output
        return 1.0 - h * h if self.activation == "tanh" else np.ones_like(h)

    def _forward(self, X):
        a1 = X @ self.W1.T + self.b1
        h1 = self._act(a1)
        u = h1 @ self.W2.T + self.b2
        norm = np.linalg.norm(u, axis=1, keepdims=True)
        scale = np.maximum(norm, EPS)
        z = u / scale
        return z, (X, h1, norm, scale)

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d_in:
            raise DimensionError(f"expected input dim {self.d_in}, got {X.shape[-1]}")
        return X

    def forward(self, x):
        """Embed a single vector (1-D) or a batch of row vectors (2-D)."""
        x = self._check_input(x)
        if x.ndim == 1:
            return self._forward(x[None, :])[0][0]
        return self._forward(x)[0]

    def forward_batch(self, X):
        """Return ``(Z, cache)`` for a batch; ``cache`` feeds :meth:`backward_batch`."""
        X = self._check_input(X)
        if X.ndim != 2:
            raise DimensionError("forward_batch expects a 2-D array")
        return self._forward(X)

    def backward_batch(self, cache, Z, grad_Z):
        """Gradients of ``sum(grad_Z * Z)`` w.r.t. parameters and inputs.

        Returns ``(param_grads, grad_X)`` where ``param_grads`` maps parameter
        names to arrays summed over the batch.
        """
        X, h1, norm, scale = cache
        grad_Z = np.asarray(grad_Z, dtype=np.float64)
        if grad_Z.shape != Z.shape:
            raise DimensionError(f"grad shape {grad_Z.shape} does not match output {Z.shape}")
        # normalisation Jacobian (I - z z^T) / ||u||; below eps the map is linear
        radial = np.sum(grad_Z * Z, axis=1, keepdims=True)
        grad_u = np.where(norm >= EPS, grad_Z - Z * radial, grad_Z) / scale
        grad_W2 = grad_u.T @ h1
        grad_b2 = grad_u.sum(axis=0)
        grad_a1 = (grad_u @ self.W2) * self._act_grad(h1)
        grad_W1 = grad_a1.T @ X
        grad_b1 = grad_a1.sum(axis=0)
        grad_X = grad_a1 @ self.W1
        return {"W1": grad_W1, "b1": grad_b1, "W2": grad_W2, "b2": grad_b2}, grad_X

    def backward(self, x, grad_out):
        """Single-sample gradients; also returns the pre-normalisation gradient.

        Returns ``(param_grads, grad_x, grad_pre_norm)``.
        """
        x = self._check_input(x)
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if x.ndim != 1 or grad_out.shape != (self.d_out,):
            raise DimensionError("backward expects one input vector and a length-d gradient")
        Z, cache = self._forward(x[None, :])
        grads, grad_X = self.backward_batch(cache, Z, grad_out[None, :])
        norm = cache[2]
        radial = float(grad_out @ Z[0])
        grad_u = (grad_out - Z[0] * radial) / np.maximum(norm[0], EPS) if norm[0, 0] >= EPS else grad_out / EPS
        return grads, grad_X[0], grad_u


MODEL_MAGIC = b"SGPSMODEL1\n"


class ModelFormatError(ValueError):
    pass


def save_model(net, path):
    """Write ``net`` as the magic header followed by an ``.npz`` payload."""
    buf = io.BytesIO()
    np.savez(buf, W1=net.W1, b1=net.b1, W2=net.W2, b2=net.b2, activation=np.array(net.activation))
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(buf.getvalue())


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MODEL_MAGIC):
        raise ModelFormatError(f"{path}: not an SGPS model file")
    try:
        with np.load(io.BytesIO(data[len(MODEL_MAGIC):]), allow_pickle=False) as z:
            return EmbeddingNet(z["W1"], z["b1"], z["W2"], z["b2"], str(z["activation"]))
    except (ValueError, KeyError, OSError) as exc:
        raise ModelFormatError(f"{path}: corrupt model payload ({exc})") from exc

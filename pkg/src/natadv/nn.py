"""Reverse-mode autodiff over dense float64 arrays, MLPs, Gaussian policies and Adam.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and
records the closure that pushes its gradient to its parents.  Everything the
trainers need (affine/tanh stacks, Gaussian log-densities, clipped PPO
surrogates, least-squares and logistic discriminator losses, gradient
penalties) is expressible with the handful of ops below.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
_LOG_2PI = float(np.log(2.0 * np.pi))


class ContractError(ValueError):
    """Raised when an input violates a shape or value contract."""


class OptimizerError(RuntimeError):
    """Raised when an update would write non-finite values into parameters."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = _backward if self.requires_grad else None

    # -- bookkeeping -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError("backward() needs a scalar root")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- elementwise arithmetic --------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

        return Tensor(a.data + b.data, _parents=(a, b), _backward=bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor(-a.data, _parents=(a,), _backward=lambda g: ((a, -g),))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

        return Tensor(a.data - b.data, _parents=(a, b), _backward=bw)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

        return Tensor(a.data * b.data, _parents=(a, b), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                (a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            )

        return Tensor(a.data / b.data, _parents=(a, b), _backward=bw)

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)

        def bw(g):
            return ((a, g * p * a.data ** (p - 1.0)),)

        return Tensor(a.data**p, _parents=(a,), _backward=bw)

    def square(self) -> "Tensor":
        a = self
        return Tensor(a.data * a.data, _parents=(a,), _backward=lambda g: ((a, 2.0 * g * a.data),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return ((a, g @ b.data.T), (b, a.data.T @ g))

        return Tensor(a.data @ b.data, _parents=(a, b), _backward=bw)

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor(a.data.T, _parents=(a,), _backward=lambda g: ((a, g.T),))

    def reshape(self, *shape) -> "Tensor":
        a = self
        old = a.shape
        return Tensor(a.data.reshape(*shape), _parents=(a,), _backward=lambda g: ((a, g.reshape(old)),))

    # -- nonlinearities ----------------------------------------------
    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return Tensor(out, _parents=(a,), _backward=lambda g: ((a, g * (1.0 - out * out)),))

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor(out, _parents=(a,), _backward=lambda g: ((a, g * out),))

    def log(self) -> "Tensor":
        a = self
        return Tensor(np.log(a.data), _parents=(a,), _backward=lambda g: ((a, g / a.data),))

    def softplus(self) -> "Tensor":
        """log(1 + e^x), evaluated without overflow."""
        a = self
        x = a.data
        out = np.logaddexp(0.0, x)

        def bw(g):
            return ((a, g * (0.5 * (1.0 + np.tanh(0.5 * x)))),)

        return Tensor(out, _parents=(a,), _backward=bw)

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _backward=lambda g: ((a, g * mask),))

    # -- reductions --------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        shape = a.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, shape).copy()),)

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        return ((a, _unbroadcast(g * pick_a, a.shape)), (b, _unbroadcast(g * ~pick_a, b.shape)))

    return Tensor(np.minimum(a.data, b.data), _parents=(a, b), _backward=bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def bw(g):
        return ((a, _unbroadcast(g * pick_a, a.shape)), (b, _unbroadcast(g * ~pick_a, b.shape)))

    return Tensor(np.maximum(a.data, b.data), _parents=(a, b), _backward=bw)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


# ----------------------------------------------------------------------
# Models
# ----------------------------------------------------------------------


class Mlp:
    """tanh hidden layers, identity output."""

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator | None = None, out_scale: float = 1.0):
        if len(layer_sizes) < 2 or any(int(n) <= 0 for n in layer_sizes):
            raise ContractError(f"bad layer sizes {layer_sizes!r}")
        self.layer_sizes = [int(n) for n in layer_sizes]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(self.layer_sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            scale = np.sqrt(1.0 / n_in) * (out_scale if i == n_layers - 1 else 1.0)
            self.weights.append(parameter(rng.normal(0.0, scale, size=(n_in, n_out))))
            self.biases.append(parameter(np.zeros(n_out)))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"expected input of size {self.in_dim}, got {x.shape[-1]}")

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        self._check(x.data)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh()
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass, numerically identical to :meth:`forward`."""
        h = np.asarray(x, dtype=np.float64)
        self._check(h)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h)
        return h

    def input_gradient(self, x) -> Tensor:
        """d(output)/d(input) for a scalar-output net, as a graph over the parameters.

        Built explicitly from the chain rule so that penalties on the input
        gradient stay differentiable with respect to the weights.
        """
        if self.out_dim != 1:
            raise ContractError("input_gradient needs a scalar-output network")
        x = as_tensor(x)
        self._check(x.data)
        acts = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh()
                acts.append(h)
        # row vector of output sensitivities; broadcasting expands it to (N, width)
        g = self.weights[-1].T
        for i in range(last - 1, -1, -1):
            g = g * (1.0 - acts[i].square())
            g = g @ self.weights[i].T
        if g.shape[0] != x.shape[0]:
            g = g + np.zeros((x.shape[0], self.in_dim))
        return g

    def state(self) -> dict:
        return {
            "kind": "mlp",
            "layer_sizes": list(self.layer_sizes),
            "params": [p.data.copy() for p in self.parameters()],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Mlp":
        net = cls(state["layer_sizes"])
        for p, v in zip(net.parameters(), state["params"]):
            if p.data.shape != np.shape(v):
                raise ContractError("parameter shape mismatch in checkpoint")
            p.data = np.array(v, dtype=np.float64, copy=True)
        return net

    def copy(self) -> "Mlp":
        return Mlp.from_state(self.state())


class GaussianPolicy:
    """Diagonal Gaussian over actions: mean from an MLP, state-independent log-std."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden: Sequence[int] = (64, 64),
        rng: np.random.Generator | None = None,
        init_log_std: float = -0.5,
    ):
        self.mlp = Mlp([obs_dim, *hidden, act_dim], rng=rng, out_scale=0.01)
        self.log_std = parameter(np.full(act_dim, float(init_log_std)))

    @property
    def obs_dim(self) -> int:
        return self.mlp.in_dim

    @property
    def act_dim(self) -> int:
        return self.mlp.out_dim

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters() + [self.log_std]

    def clamped_log_std(self) -> Tensor:
        return self.log_std.clip(LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs) -> Tensor:
        return self.mlp.forward(obs)

    def log_prob(self, obs, actions: np.ndarray) -> Tensor:
        mu = self.mlp.forward(obs)
        log_std = self.clamped_log_std()
        z = (as_tensor(actions) - mu) * (-log_std).exp()
        return (z.square() * -0.5 - log_std).sum(axis=1) - 0.5 * self.act_dim * _LOG_2PI

    def entropy(self) -> Tensor:
        return (self.clamped_log_std() + 0.5 * (1.0 + _LOG_2PI)).sum()

    def act(self, obs: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        """Sample with externally drawn standard-normal ``noise``; ``None`` gives the mean."""
        mu = self.mlp.predict(obs)
        if noise is None:
            return mu
        std = np.exp(np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX))
        return mu + std * noise

    def log_prob_np(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu = self.mlp.predict(obs)
        log_std = np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
        z = (actions - mu) * np.exp(-log_std)
        return (z * z * -0.5 - log_std).sum(axis=1) - 0.5 * self.act_dim * _LOG_2PI

    def state(self) -> dict:
        s = self.mlp.state()
        s["kind"] = "gaussian_policy"
        s["log_std"] = self.log_std.data.copy()
        return s

    @classmethod
    def from_state(cls, state: dict) -> "GaussianPolicy":
        sizes = state["layer_sizes"]
        pol = cls(sizes[0], sizes[-1], hidden=sizes[1:-1])
        pol.mlp = Mlp.from_state(state)
        pol.log_std = parameter(state["log_std"])
        return pol

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy.from_state(self.state())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])


# ----------------------------------------------------------------------
# Optimisation
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-5
    eps: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is updated in place."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError("shape mismatch between params, grads and moments")
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient encountered; aborting update")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


class Adam:
    """Binds an :class:`AdamState` to a list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 5e-5, eps: float = 1e-4, grad_clip: float | None = None):
        self.params = list(params)
        self.state = AdamState(lr=lr, eps=eps)
        self.grad_clip = grad_clip

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply gradients currently stored on the parameters; returns the pre-clip global norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(norm):
            raise OptimizerError("non-finite gradient norm; aborting update")
        if self.grad_clip is not None and norm > self.grad_clip:
            grads = [g * (self.grad_clip / norm) for g in grads]
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, v in zip(self.params, new):
            p.data = v
        return norm

    def state_dict(self) -> dict:
        s = self.state
        return {"lr": s.lr, "eps": s.eps, "beta1": s.beta1, "beta2": s.beta2, "step": s.step, "m": s.m, "v": s.v}

    def load_state_dict(self, d: dict) -> None:
        self.state = AdamState(
            lr=float(d["lr"]), eps=float(d["eps"]), beta1=float(d["beta1"]), beta2=float(d["beta2"]),
            step=int(d["step"]), m=[np.array(a) for a in d["m"]], v=[np.array(a) for a in d["v"]],
        )


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------


def _flatten_state(prefix: str, state: dict, arrays: dict, meta: dict) -> None:
    m = {}
    for key, value in state.items():
        if isinstance(value, np.ndarray):
            arrays[f"{prefix}/{key}"] = value
            m[key] = {"array": f"{prefix}/{key}"}
        elif isinstance(value, list) and value and isinstance(value[0], np.ndarray):
            names = []
            for i, a in enumerate(value):
                arrays[f"{prefix}/{key}/{i}"] = a
                names.append(f"{prefix}/{key}/{i}")
            m[key] = {"arrays": names}
        elif isinstance(value, dict):
            sub: dict = {}
            _flatten_state(f"{prefix}/{key}", value, arrays, sub)
            m[key] = {"dict": sub}
        else:
            m[key] = {"value": value}
    meta.update(m)


def _unflatten_state(meta: dict, arrays) -> dict:
    out = {}
    for key, spec in meta.items():
        if "array" in spec:
            out[key] = np.array(arrays[spec["array"]])
        elif "arrays" in spec:
            out[key] = [np.array(arrays[n]) for n in spec["arrays"]]
        elif "dict" in spec:
            out[key] = _unflatten_state(spec["dict"], arrays)
        else:
            out[key] = spec["value"]
    return out


def dump_checkpoint(entries: dict[str, dict]) -> bytes:
    """Serialise named model/optimizer states into a versioned ``.npz`` blob."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for name, state in entries.items():
        sub: dict = {}
        _flatten_state(name, state, arrays, sub)
        meta[name] = sub
    arrays["__meta__"] = np.frombuffer(
        json.dumps({"version": CHECKPOINT_VERSION, "entries": meta}, sort_keys=True).encode(), dtype=np.uint8
    )
    # hand-built zip with a fixed timestamp so identical states give identical bytes
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> dict[str, dict]:
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta.get('version')!r}")
        return {name: _unflatten_state(m, z) for name, m in meta["entries"].items()}


def save_models(path, **models) -> None:
    entries = {name: m.state() for name, m in models.items()}
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(entries))


def model_from_state(state: dict):
    kind = state.get("kind")
    if kind == "gaussian_policy":
        return GaussianPolicy.from_state(state)
    if kind == "mlp":
        return Mlp.from_state(state)
    raise ContractError(f"unknown model kind {kind!r}")


def load_models(path) -> dict:
    with open(path, "rb") as fh:
        entries = parse_checkpoint(fh.read())
    return {name: model_from_state(s) for name, s in entries.items() if s.get("kind") in ("gaussian_policy", "mlp")}

"""Small dense feed-forward networks with hand-written backprop and Adam.

All parameters of a network live in one flat vector. The flat order is, for
each layer in turn, the weight matrix (shape ``(fan_in, fan_out)``, row-major)
followed by its bias vector. ``weights[k]`` and ``biases[k]`` are views into
that vector, so optimizers and anchoring work on the flat view directly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear", "softmax")
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class NotReadyError(RuntimeError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softmax":
        return softmax(z)
    return z


def _activation_backward(name: str, z: np.ndarray, y: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    if name == "relu":
        return grad_y * (z > 0)
    if name == "tanh":
        return grad_y * (1 - y * y)
    if name == "softmax":
        return y * (grad_y - np.sum(grad_y * y, axis=-1, keepdims=True))
    return grad_y


class DenseNet:
    def __init__(self, input_width: int, hidden_widths, output_width: int,
                 output_activation: str = "linear", hidden_activation: str = "relu",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        for name in (output_activation, hidden_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        self.input_width = int(input_width)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.output_width = int(output_width)
        self.output_activation = output_activation
        self.hidden_activation = hidden_activation
        self.dtype = np.dtype(dtype)

        widths = (self.input_width, *self.hidden_widths, self.output_width)
        self.shapes = list(zip(widths[:-1], widths[1:]))
        self.size = sum(i * o + o for i, o in self.shapes)
        self.params = np.zeros(self.size, dtype=self.dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for fan_in, fan_out in self.shapes:
            self.weights.append(self.params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            self.biases.append(self.params[offset:offset + fan_out])
            offset += fan_out

        if rng is not None:
            for W in self.weights:
                bound = 1.0 / np.sqrt(W.shape[0])
                W[...] = rng.uniform(-bound, bound, size=W.shape)

    @property
    def activations(self) -> list[str]:
        return [self.hidden_activation] * len(self.hidden_widths) + [self.output_activation]

    def architecture(self) -> dict:
        return {
            "input_width": self.input_width,
            "hidden_widths": list(self.hidden_widths),
            "output_width": self.output_width,
            "output_activation": self.output_activation,
            "hidden_activation": self.hidden_activation,
            "dtype": self.dtype.name,
        }

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.input_width or x.ndim not in (1, 2):
            raise ShapeError(f"expected input width {self.input_width}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        h = self._check_input(x)
        for W, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(act, h @ W + b)
        return h

    def forward_cache(self, x):
        """Forward pass that also returns what :meth:`backward` needs."""
        h = self._check_input(x)
        if h.ndim == 1:
            h = h[None, :]
        inputs, pre, post = [], [], []
        for W, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ W + b
            h = _activate(act, z)
            pre.append(z)
            post.append(h)
        return h, (inputs, pre, post)

    def backward(self, cache, grad_output, need_params: bool = True):
        """Reverse-mode pass from dL/d(output) back to the parameters and the input.

        Returns ``(grad_params, grad_input)``; ``grad_params`` is a flat vector
        in the network's flat order, or ``None`` when ``need_params`` is False.
        """
        inputs, pre, post = cache
        g = np.asarray(grad_output, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != post[-1].shape:
            raise ShapeError(f"grad_output shape {g.shape} does not match output {post[-1].shape}")
        grad = np.empty(self.size, dtype=self.dtype) if need_params else None
        ends = np.cumsum([i * o + o for i, o in self.shapes])
        acts = self.activations
        for k in range(len(self.shapes) - 1, -1, -1):
            g = _activation_backward(acts[k], pre[k], post[k], g)
            if need_params:
                fan_in, fan_out = self.shapes[k]
                end = ends[k]
                start = end - fan_in * fan_out - fan_out
                grad[start:end - fan_out] = (inputs[k].T @ g).reshape(-1)
                grad[end - fan_out:end] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grad, g

    def copy(self) -> "DenseNet":
        other = DenseNet(self.input_width, self.hidden_widths, self.output_width,
                         self.output_activation, self.hidden_activation, dtype=self.dtype)
        other.params[:] = self.params
        return other

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, flat) -> None:
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise ShapeError(f"expected {self.size} parameters, got shape {flat.shape}")
        self.params[:] = flat


def loss_gradient(net: DenseNet, x, loss):
    """Value and parameter gradient of ``loss(net(x))``.

    ``loss`` maps the network output to ``(value, dvalue/doutput)``; the value
    must be a scalar.
    """
    y, cache = net.forward_cache(x)
    value, grad_y = loss(y)
    if np.ndim(value) != 0:
        raise ValueError(f"loss must be scalar, got shape {np.shape(value)}")
    grad, _ = net.backward(cache, grad_y)
    return float(value), grad


class Adam:
    """Adam over a flat parameter vector.

    The bias-corrected second moment doubles as a diagonal Fisher-information
    estimate (:meth:`fisher_estimate`).
    """

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, dtype=np.float64):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def update(self, params: np.ndarray, grad: np.ndarray) -> None:
        if grad.shape != params.shape or grad.shape != self.m.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient rejected")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * (grad * grad)
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        params -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params.dtype, copy=False)

    def fisher_estimate(self) -> np.ndarray:
        if self.t == 0:
            raise NotReadyError("no optimizer step taken yet")
        return self.v / (1 - self.beta2 ** self.t)

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t, **self.hyperparameters()}

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls(len(state["m"]), state["lr"], state["beta1"], state["beta2"], state["eps"],
                  dtype=np.asarray(state["m"]).dtype)
        opt.m[:] = state["m"]
        opt.v[:] = state["v"]
        opt.t = int(state["t"])
        return opt


def net_from_architecture(arch: dict) -> DenseNet:
    return DenseNet(arch["input_width"], arch["hidden_widths"], arch["output_width"],
                    arch["output_activation"], arch["hidden_activation"],
                    dtype=np.dtype(arch.get("dtype", "float64")))


def save_net(net: DenseNet, path) -> None:
    """Write a parameter snapshot; ``.json`` gives text, anything else a binary ``.npz``."""
    path = Path(path)
    header = {"format": FORMAT_VERSION, "architecture": net.architecture()}
    if path.suffix == ".json":
        # repr of a Python float round-trips exactly
        header["params"] = [float(p) for p in net.params.astype(np.float64)]
        path.write_text(json.dumps(header))
    else:
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), params=net.params.astype(np.float64))


def load_net(path) -> DenseNet:
    path = Path(path)
    if path.suffix == ".json":
        header = json.loads(path.read_text())
        params = np.array(header["params"], dtype=np.float64)
    else:
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            params = data["params"]
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot format {header.get('format')!r}")
    net = net_from_architecture(header["architecture"])
    net.unflatten(params.astype(net.dtype))
    return net

"""Small fully connected networks with hand-written backprop and optimisers.

Parameters may carry leading "stack" axes so several independent networks
(one per agent) run in a single batched matmul: weights are
``(*stack, fan_in, fan_out)`` and inputs ``(*stack, batch, fan_in)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OUTPUTS = ("tanh", "identity")
FORMAT_TAG = "# cellfree-loc mlp v1"


def leaky_relu(z, slope: float = 0.01):
    return np.where(z > 0, z, slope * z)


class Mlp:
    """Leaky-ReLU hidden layers and a tanh or identity output layer."""

    def __init__(self, sizes, output: str = "identity", slope: float = 0.01, rng=None, stack=(),
                 final_scale: float = 3e-3):
        if output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}")
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError("need at least input and output sizes, all positive")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.slope = float(slope)
        self.stack = tuple(int(s) for s in stack)
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights, self.biases = [], []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            # He-uniform for hidden layers, small uniform on the last layer
            bound = final_scale if i == n_layers - 1 else np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=self.stack + (fan_in, fan_out)))
            self.biases.append(np.zeros(self.stack + (fan_out,)))

    # -- parameter plumbing -------------------------------------------------

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, values) -> None:
        values = list(values)
        for i in range(len(self.weights)):
            self.weights[i][...] = values[2 * i]
            self.biases[i][...] = values[2 * i + 1]

    def copy(self) -> "Mlp":
        twin = Mlp.__new__(Mlp)
        twin.sizes, twin.output, twin.slope, twin.stack = self.sizes, self.output, self.slope, self.stack
        twin.weights = [W.copy() for W in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def view(self, index) -> "Mlp":
        """A network sharing memory with one slice of the stack."""
        twin = Mlp.__new__(Mlp)
        twin.sizes, twin.output, twin.slope = self.sizes, self.output, self.slope
        twin.weights = [W[index] for W in self.weights]
        twin.biases = [b[index] for b in self.biases]
        twin.stack = twin.biases[0].shape[:-1]
        return twin

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    # -- forward / backward -------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input size {x.shape[-1]} != {self.sizes[0]}")
        return x

    def forward(self, x):
        """Returns ``(output, cache)``; ``x`` is ``(*stack, batch, in)`` or ``(in,)`` when unstacked."""
        x = self._check(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        acts, pre = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b[..., None, :]
            pre.append(z)
            if i < last:
                h = leaky_relu(z, self.slope)
            else:
                h = np.tanh(z) if self.output == "tanh" else z
            acts.append(h)
        out = h[0] if single else h
        return out, (acts, pre, single)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, upstream):
        """Reverse-mode pass: gradients for ``params`` order and for the input."""
        acts, pre, single = cache
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
        last = len(self.weights) - 1
        grads = [None] * (2 * len(self.weights))
        for i in range(last, -1, -1):
            if i == last:
                if self.output == "tanh":
                    g = g * (1.0 - acts[-1] ** 2)
            else:
                g = g * np.where(pre[i] > 0, 1.0, self.slope)
            grads[2 * i] = np.swapaxes(acts[i], -1, -2) @ g
            grads[2 * i + 1] = g.sum(axis=-2)
            g = g @ np.swapaxes(self.weights[i], -1, -2)
        return grads, (g[0] if single else g)

    # -- text format --------------------------------------------------------

    def to_text(self) -> str:
        lines = [FORMAT_TAG, "layers " + " ".join(map(str, self.sizes)),
                 "stack " + " ".join(map(str, self.stack)), f"output {self.output}", f"slope {self.slope!r}"]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            lines.append(f"W{i} " + " ".join(repr(float(v)) for v in W.ravel()))
            lines.append(f"b{i} " + " ".join(repr(float(v)) for v in b.ravel()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Mlp":
        rows = [r for r in text.splitlines() if r.strip()]
        if rows[0] != FORMAT_TAG:
            raise ValueError("not a serialised network")
        fields = {r.split(" ", 1)[0]: (r.split(" ", 1)[1] if " " in r else "") for r in rows[1:]}
        sizes = [int(v) for v in fields["layers"].split()]
        stack = tuple(int(v) for v in fields["stack"].split())
        net = cls(sizes, output=fields["output"], slope=float(fields["slope"]), stack=stack)
        for i in range(len(sizes) - 1):
            net.weights[i][...] = np.array(fields[f"W{i}"].split(), dtype=float).reshape(net.weights[i].shape)
            net.biases[i][...] = np.array(fields[f"b{i}"].split(), dtype=float).reshape(net.biases[i].shape)
        return net


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_gradient(net: Mlp, x, upstream):
    """Parameter gradients (``params`` order) and input gradient of ``upstream . net(x)``."""
    _, cache = net.forward(x)
    return net.backward(cache, upstream)


def soft_update(target: Mlp, current: Mlp, tau: float, convention: str = "printed") -> None:
    """Blend ``current`` into ``target`` in place.

    ``printed``: target <- tau*target + (1-tau)*current.
    ``conventional``: target <- (1-tau)*target + tau*current.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if target.sizes != current.sizes or target.stack != current.stack:
        raise ValueError("target and current networks differ in shape")
    keep = tau if convention == "printed" else 1.0 - tau
    if convention not in ("printed", "conventional"):
        raise ValueError("convention must be 'printed' or 'conventional'")
    for t, c in zip(target.params, current.params):
        t *= keep
        t += (1.0 - keep) * c


@dataclass
class Sgd:
    lr: float = 1e-3

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError("optimizer must be 'sgd' or 'adam'")

"""Dense two-headed networks with hand-written reverse-mode gradients.

Parameters are plain ``dict[str, np.ndarray]``. Every array may carry a
leading member axis so that a whole ensemble is evaluated with one batched
matmul per layer; member ``i`` only ever touches slice ``[i]``.

Layout for a network with ``L`` hidden layers::

    W0, b0, ..., W{L-1}, b{L-1}   hidden layers (leaky ReLU)
    Wm, bm                        mean head (linear)
    Wv, bv                        log-variance head (linear)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of one network: input width, hidden widths and output width."""

    n_in: int
    hidden: tuple[int, ...]
    n_out: int

    @property
    def n_hidden_layers(self) -> int:
        return len(self.hidden)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        widths = (self.n_in,) + tuple(self.hidden)
        for i in range(len(self.hidden)):
            shapes[f"W{i}"] = (widths[i], widths[i + 1])
            shapes[f"b{i}"] = (widths[i + 1],)
        last = widths[-1]
        shapes["Wm"] = (last, self.n_out)
        shapes["bm"] = (self.n_out,)
        shapes["Wv"] = (last, self.n_out)
        shapes["bv"] = (self.n_out,)
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))


def init_params(spec: NetworkSpec, rng: np.random.Generator, n_members: int | None = None):
    """Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    lead = () if n_members is None else (n_members,)
    params = {}
    for name, shape in spec.shapes().items():
        fan_in = shape[0] if name.startswith("W") else spec.shapes()["W" + name[1:]][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=lead + shape)
    return params


def zero_params(spec: NetworkSpec, n_members: int | None = None):
    lead = () if n_members is None else (n_members,)
    return {name: np.zeros(lead + shape) for name, shape in spec.shapes().items()}


def forward(params, x, n_hidden: int, need_cache: bool = False):
    """Evaluate the network.

    ``x`` has shape ``(..., B, n_in)`` where the leading axes broadcast
    against the member axis of ``params`` (if any). Returns the raw mean and
    raw (unclamped) log-variance heads, plus the activation cache when
    ``need_cache`` is set.
    """
    h = x
    cache = [x]
    for i in range(n_hidden):
        z = h @ params[f"W{i}"]
        z += params[f"b{i}"][..., None, :]
        # in place where possible: allocation dominates at these sizes
        h = np.multiply(z, LEAKY_SLOPE)
        np.maximum(z, h, out=h)
        if need_cache:
            cache.append(z)
            cache.append(h)
    mean = h @ params["Wm"]
    mean += params["bm"][..., None, :]
    logvar = h @ params["Wv"]
    logvar += params["bv"][..., None, :]
    if need_cache:
        return mean, logvar, cache
    return mean, logvar


def backward(params, cache, d_mean, d_logvar, n_hidden: int):
    """Gradients of a scalar loss w.r.t. all parameters.

    ``d_mean`` and ``d_logvar`` are the loss gradients w.r.t. the raw head
    outputs; either may be ``None`` (treated as zero, and the matching head
    receives zero gradient). Batch axes are summed out; the member axis is
    kept.
    """
    h = cache[-1]
    grads = {}
    h_t = np.swapaxes(h, -1, -2)
    dh = 0.0
    for head, d_out in (("m", d_mean), ("v", d_logvar)):
        if d_out is None:
            grads[f"W{head}"] = np.zeros_like(params[f"W{head}"])
            grads[f"b{head}"] = np.zeros_like(params[f"b{head}"])
            continue
        grads[f"W{head}"] = h_t @ d_out
        grads[f"b{head}"] = d_out.sum(axis=-2)
        dh = dh + d_out @ np.swapaxes(params[f"W{head}"], -1, -2)
    for i in reversed(range(n_hidden)):
        z = cache[1 + 2 * i]
        h_prev = cache[2 * i]
        dz = dh * np.where(z > 0, 1.0, LEAKY_SLOPE)
        grads[f"W{i}"] = np.swapaxes(h_prev, -1, -2) @ dz
        grads[f"b{i}"] = dz.sum(axis=-2)
        if i > 0:
            dh = dz @ np.swapaxes(params[f"W{i}"], -1, -2)
    return grads


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def unflatten(vector: np.ndarray, like) -> dict:
    out, pos = {}, 0
    for k in sorted(like):
        size = like[k].size
        out[k] = vector[pos:pos + size].reshape(like[k].shape).copy()
        pos += size
    if pos != vector.size:
        raise ValueError("parameter vector has wrong length")
    return out

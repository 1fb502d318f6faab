"""Dense multilayer perceptron with flat parameter packing and hand-derived
reverse passes.

The network is a fixed stack of linear layers with tanh after every layer
except the last.  Parameters live in one flat float64 vector (row-major
weight matrix then bias, layer by layer) so optimizers, checkpoints, and the
adjoint system all treat the model as a single array.  Forward passes run on
row batches; the reverse pass consumes the forward cache and returns the
parameter cotangent in the same flat packing plus the input cotangent.
No autodiff framework is involved anywhere.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "layer_sizes",
    "param_count",
    "init_params",
    "unpack",
    "forward",
    "vjp",
]


def layer_sizes(n_in, n_out, width, n_layers=5):
    """(fan_in, fan_out) per layer for the n_in -> width x(L-2) -> n_out stack."""
    if n_layers < 2:
        raise InvalidInputError("need at least an input and an output layer")
    sizes = [(int(n_in), int(width))]
    sizes += [(int(width), int(width))] * (n_layers - 2)
    sizes.append((int(width), int(n_out)))
    return sizes


def param_count(n_in, n_out, width, n_layers=5):
    return sum(ni * no + no for ni, no in layer_sizes(n_in, n_out, width, n_layers))


def init_params(n_in, n_out, width, rng, n_layers=5):
    """Fan-in-scaled uniform weights; the last layer starts at exactly zero.

    A zero final layer makes the freshly initialized network the zero map,
    which downstream means "no change with flux" — a neutral starting model.
    """
    sizes = layer_sizes(n_in, n_out, width, n_layers)
    parts = []
    for i, (ni, no) in enumerate(sizes):
        if i == len(sizes) - 1:
            parts.append(np.zeros(ni * no + no))
            continue
        bound = 1.0 / np.sqrt(ni)
        parts.append(rng.uniform(-bound, bound, size=ni * no + no))
    return np.concatenate(parts)


def unpack(theta, sizes):
    """Views (W, b) per layer into the flat vector; no copies."""
    theta = np.asarray(theta)
    expected = sum(ni * no + no for ni, no in sizes)
    if theta.shape != (expected,):
        raise InvalidInputError(
            f"parameter vector has {theta.size} entries, architecture needs {expected}"
        )
    out = []
    o = 0
    for ni, no in sizes:
        w = theta[o:o + ni * no].reshape(no, ni)
        o += ni * no
        b = theta[o:o + no]
        o += no
        out.append((w, b))
    return out


def forward(theta, x, sizes):
    """Batched forward pass: x is (B, n_in); returns (y, cache).

    The cache holds each layer's input batch, which is exactly what the
    reverse pass needs (tanh' recomputes from the next layer's input).
    """
    layers = unpack(theta, sizes)
    xs = [np.asarray(x, dtype=float)]
    a = xs[0]
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        a = z if i == len(layers) - 1 else np.tanh(z)
        if i < len(layers) - 1:
            xs.append(a)
    return a, xs


def vjp(theta, cache, gy, sizes):
    """Reverse pass: cotangent of (flat parameters, input batch).

    ``cache`` comes from :func:`forward` on the same theta; ``gy`` has the
    output's shape.  The parameter cotangent sums over the batch.
    """
    layers = unpack(theta, sizes)
    gtheta = np.zeros_like(np.asarray(theta, dtype=float))
    offsets = []
    o = 0
    for ni, no in sizes:
        offsets.append(o)
        o += ni * no + no
    g = np.asarray(gy, dtype=float)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        ni, no = sizes[i]
        if i < len(layers) - 1:
            a = cache[i + 1]           # tanh output of this layer
            g = g * (1.0 - a * a)
        x_i = cache[i]
        off = offsets[i]
        gtheta[off:off + ni * no] = (g.T @ x_i).ravel()
        gtheta[off + ni * no:off + ni * no + no] = g.sum(axis=0)
        g = g @ w
    return gtheta, g

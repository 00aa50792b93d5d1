"""Shared builders and oracles for randomized gradient and layer tests."""

import itertools

import numpy as np

from subdistill import netcore as nc


def fdiff_logits(fn, z, h=1e-5):
    """Central finite differences of a scalar loss over every logit entry."""
    numeric = np.zeros_like(z)
    flat = z.reshape(-1)
    out = numeric.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = fn(z)
        flat[j] = orig - h
        down = fn(z)
        flat[j] = orig
        out[j] = (up - down) / (2 * h)
    return numeric


def max_rel_error(grad, numeric):
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(grad - numeric) / denom))


def brute_force_best_accuracy(counts):
    """Exhaustive search over all permutations; oracle for the LAP solver."""
    best = 0
    for perm in itertools.permutations(range(counts.shape[0])):
        best = max(best, sum(counts[i, perm[i]] for i in range(counts.shape[0])))
    return best / counts.sum()


def random_dense_net(rng, n_in=3, n_hidden=4, c=2, s=2, dtype=np.float64):
    """Dense-ReLU-Dense-ReLU stack with a c*s head, random weights."""
    def dense(i, o):
        return nc.Dense(i, o, w=rng.standard_normal((i, o)),
                        b=rng.standard_normal(o), dtype=dtype)
    layers = [dense(n_in, n_hidden), nc.ReLU(), dense(n_hidden, n_hidden), nc.ReLU()]
    return nc.Network(layers, dense(n_hidden, c * s), c, s, dtype=dtype)


def random_layer_net(kind, rng, dtype=np.float64):
    """A tiny network exercising one layer kind; returns (net, input batch)."""
    c, s = 2, 2
    n = int(rng.integers(1, 4))
    if kind == "dense":
        i, h = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        net = nc.Network(
            [nc.Dense(i, h, w=rng.standard_normal((i, h)),
                      b=rng.standard_normal(h), dtype=dtype)],
            nc.Dense(h, c * s, w=rng.standard_normal((h, c * s)),
                     b=rng.standard_normal(c * s), dtype=dtype),
            c, s, dtype=dtype)
        x = rng.standard_normal((n, i))
    elif kind == "relu":
        i = int(rng.integers(2, 6))
        net = nc.Network(
            [nc.Dense(i, i, w=rng.standard_normal((i, i)),
                      b=rng.standard_normal(i), dtype=dtype), nc.ReLU()],
            nc.Dense(i, c * s, w=rng.standard_normal((i, c * s)),
                     b=rng.standard_normal(c * s), dtype=dtype),
            c, s, dtype=dtype)
        x = rng.standard_normal((n, i)) + 0.05  # keep entries off the kink
    elif kind == "conv2d":
        h = w = int(rng.integers(4, 7))
        ch_in, ch_out = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        k = int(rng.integers(2, 4))
        pad = "same" if rng.random() < 0.5 else "valid"
        stride = int(rng.integers(1, 3))
        conv = nc.Conv2D(k, k, ch_in, ch_out, stride=stride, padding=pad,
                         w=rng.standard_normal((k, k, ch_in, ch_out)),
                         b=rng.standard_normal(ch_out), dtype=dtype)
        oh, ow, _, _ = conv._geometry(h, w)
        net = nc.Network(
            [conv, nc.Flatten()],
            nc.Dense(oh * ow * ch_out, c * s,
                     w=rng.standard_normal((oh * ow * ch_out, c * s)),
                     b=rng.standard_normal(c * s), dtype=dtype),
            c, s, dtype=dtype)
        x = rng.standard_normal((n, h, w, ch_in))
    elif kind == "maxpool2d":
        h = w = int(rng.integers(4, 7))
        ch = int(rng.integers(1, 3))
        k = int(rng.integers(2, 4))
        stride = int(rng.integers(1, k + 1))
        pool = nc.MaxPool2D(k, stride)
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        net = nc.Network(
            [pool, nc.Flatten()],
            nc.Dense(oh * ow * ch, c * s,
                     w=rng.standard_normal((oh * ow * ch, c * s)),
                     b=rng.standard_normal(c * s), dtype=dtype),
            c, s, dtype=dtype)
        x = rng.standard_normal((n, h, w, ch))
    elif kind == "dropout":
        i = int(rng.integers(2, 6))
        net = nc.Network(
            [nc.Dense(i, i, w=rng.standard_normal((i, i)),
                      b=rng.standard_normal(i), dtype=dtype),
             nc.Dropout(float(rng.uniform(0.1, 0.6)))],
            nc.Dense(i, c * s, w=rng.standard_normal((i, c * s)),
                     b=rng.standard_normal(c * s), dtype=dtype),
            c, s, dtype=dtype)
        x = rng.standard_normal((n, i))
    elif kind == "flatten":
        h = w = int(rng.integers(2, 4))
        ch = int(rng.integers(1, 3))
        net = nc.Network(
            [nc.Flatten()],
            nc.Dense(h * w * ch, c * s,
                     w=rng.standard_normal((h * w * ch, c * s)),
                     b=rng.standard_normal(c * s), dtype=dtype),
            c, s, dtype=dtype)
        x = rng.standard_normal((n, h, w, ch))
    else:
        raise ValueError(kind)
    return net, x


LAYER_KIND_SEEDS = {"dense": 101, "relu": 202, "conv2d": 303,
                    "maxpool2d": 404, "dropout": 505, "flatten": 606}


def smooth_logit_loss(rng, c, s):
    """Random quadratic scalar loss of the logits with its analytic gradient.

    loss = sum(coef * z + 0.5 * curv * z^2); quadratic, so central finite
    differences are exact up to rounding.  Independent of the package's
    losses.
    """
    coef = rng.standard_normal((1, c, s))
    curv = rng.uniform(0.5, 2.0, size=(1, c, s))

    def loss_fn(penultimate, logits):
        value = float(np.sum(coef * logits + 0.5 * curv * logits ** 2))
        return value, coef + curv * logits

    return loss_fn

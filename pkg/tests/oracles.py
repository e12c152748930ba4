"""Reference computations kept independent of autograd and of the package internals."""

import numpy as np
import torch


def central_differences(fn, inputs, step=1e-5):
    """Central finite differences of scalar ``fn(*inputs)`` w.r.t. every entry of every input."""
    inputs = [t.detach().clone() for t in inputs]
    grads = []
    for t in inputs:
        g = torch.zeros_like(t)
        flat, gflat = t.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn(*inputs))
            flat[i] = orig - step
            down = float(fn(*inputs))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def gradient_agreement(analytic, numeric, rel_tol=1e-4, abs_tol=1e-6):
    """Fraction of coordinates within ``rel_tol`` and the max abs error over the others."""
    a = torch.cat([t.reshape(-1) for t in analytic]).double()
    n = torch.cat([t.reshape(-1) for t in numeric]).double()
    abs_err = (a - n).abs()
    scale = torch.maximum(a.abs(), n.abs())
    rel_ok = abs_err <= rel_tol * scale
    rest = abs_err[~rel_ok]
    return rel_ok.double().mean().item(), (rest.max().item() if rest.numel() else 0.0)


def dense_forward(weights, biases, x, activation):
    """Plain-Python multilayer perceptron; activation between layers, none after the last."""
    h = [float(v) for v in x]
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = [sum(w[i][j] * h[j] for j in range(len(h))) + b[i] for i in range(len(w))]
        if k < len(weights) - 1:
            h = [activation(v) for v in h]
    return h


def silu(v):
    return v / (1.0 + np.exp(-v))


def batched_central_differences(batch_fn, inputs, step=1e-5):
    """Central differences with every perturbed input evaluated in one batch.

    ``inputs`` are unbatched tensors; ``batch_fn`` takes the same tensors with
    a leading batch dimension and returns one scalar per batch row.
    """
    inputs = [t.detach() for t in inputs]
    sizes = [t.numel() for t in inputs]
    total = sum(sizes)
    batches = []
    offset = 0
    for t, size in zip(inputs, sizes):
        rows = t.reshape(1, -1).repeat(2 * total, 1)
        idx = torch.arange(size)
        rows[offset + idx, idx] += step
        rows[total + offset + idx, idx] -= step
        batches.append(rows.view(2 * total, *t.shape))
        offset += size
    out = batch_fn(*batches)
    flat = (out[:total] - out[total:]) / (2 * step)
    grads, offset = [], 0
    for t, size in zip(inputs, sizes):
        grads.append(flat[offset:offset + size].view_as(t))
        offset += size
    return grads

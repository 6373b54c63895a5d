"""Reference computations used as independent oracles by the test suite."""

from fractions import Fraction

import numpy as np


def network_loss(layers, activations, x, y):
    """MSE of a plain-python-loop network, written without nncore.

    Works on floats or Fractions; with Fractions the result is exact.
    """
    total = 0
    for row, target in zip(x, y):
        h = list(row)
        for (w, b), act in zip(layers, activations):
            z = [sum(w[o][i] * h[i] for i in range(len(h))) + b[o] for o in range(len(b))]
            h = [v if v > 0 else 0 * v for v in z] if act == "relu" else z
        d = h[0] - target
        total += d * d
    return total / len(y)


def central_differences(layers, activations, x, y, step=1e-6):
    """Central finite differences of ``network_loss`` for every parameter.

    Loss values are computed in exact rational arithmetic on the float64
    parameter values, so the only error left is the truncation of the
    difference quotient itself.
    """
    exact = [([[Fraction(v) for v in row] for row in w], [Fraction(v) for v in b]) for w, b in layers]
    xs = [[Fraction(v) for v in row] for row in x]
    ys = [Fraction(v) for v in y]
    h = Fraction(step)

    def diff(container, idx):
        orig = container[idx]
        container[idx] = orig + h
        up = network_loss(exact, activations, xs, ys)
        container[idx] = orig - h
        down = network_loss(exact, activations, xs, ys)
        container[idx] = orig
        return float((up - down) / (2 * h))

    grads = []
    for w, b in exact:
        gw = np.array([[diff(row, i) for i in range(len(row))] for row in w])
        gb = np.array([diff(b, o) for o in range(len(b))])
        grads.append((gw, gb))
    return grads


def relative_error(a, b):
    """Elementwise |a-b| / max(|a|, |b|), with 0/0 taken as 0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros(np.broadcast(a, b).shape)
    nz = scale > 0
    out[nz] = np.abs(a - b)[nz] / scale[nz]
    return out


# -- split-network reference ---------------------------------------------------


def block_monolith(heads, tail):
    """Monolithic network whose first stage is the disjoint union of ``heads``.

    Every head layer becomes one block-diagonal layer; the tail follows
    unchanged. Heads must share depth and activations.
    """
    depth = len(heads[0].layers)
    if any(len(h.layers) != depth or h.activations != heads[0].activations for h in heads):
        raise ValueError("heads must share depth and activations")
    layers = []
    for k in range(depth):
        ws = [h.layers[k][0] for h in heads]
        w = np.zeros((sum(a.shape[0] for a in ws), sum(a.shape[1] for a in ws)))
        r = c = 0
        for a in ws:
            w[r : r + a.shape[0], c : c + a.shape[1]] = a
            r, c = r + a.shape[0], c + a.shape[1]
        layers.append((w, np.concatenate([h.layers[k][1] for h in heads])))
    return layers + [tuple(layer) for layer in tail.layers], heads[0].activations + tail.activations


def block_mask(heads, n_tail):
    """1 on each head's diagonal block, 0 off it; all ones for tail layers."""
    mask = []
    for k in range(len(heads[0].layers)):
        ws = [h.layers[k][0] for h in heads]
        m = np.zeros((sum(a.shape[0] for a in ws), sum(a.shape[1] for a in ws)))
        r = c = 0
        for a in ws:
            m[r : r + a.shape[0], c : c + a.shape[1]] = 1.0
            r, c = r + a.shape[0], c + a.shape[1]
        mask.append(m)
    return mask + [None] * n_tail


def monolith_step(layers, activations, mask, x, y, lr):
    """One centralized MSE/SGD step in plain numpy, off-block gradients masked.

    Written independently of nncore: forward, chain rule and update are
    spelled out here.
    """
    hs, zs = [x], []
    h = x
    for (w, b), act in zip(layers, activations):
        z = h @ w.T + b
        zs.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
        hs.append(h)
    diff = h[:, 0] - y
    g = ((2.0 / y.size) * diff)[:, None]
    new = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w, b = layers[k]
        if activations[k] == "relu":
            g = g * (zs[k] > 0)
        gw, gb = g.T @ hs[k], g.sum(axis=0)
        if mask[k] is not None:
            gw = gw * mask[k]
        g = g @ w
        new[k] = (w - lr * gw, b - lr * gb)
    return new, float(diff @ diff) / y.size


def monolith_blocks(layers, heads):
    """Slice the head blocks back out of a block-diagonal monolith."""
    out = []
    for j, h in enumerate(heads):
        parts = []
        for k, (w, _) in enumerate(h.layers):
            r = sum(other.layers[k][0].shape[0] for other in heads[:j])
            c = sum(other.layers[k][0].shape[1] for other in heads[:j])
            big_w, big_b = layers[k]
            parts.append((big_w[r : r + w.shape[0], c : c + w.shape[1]], big_b[r : r + w.shape[0]]))
        out.append(parts)
    return out


def monolith_trajectory(plan, heads, tail):
    """Parameters of the centralized block monolith after every step of ``plan``.

    Uses the same shared batch order as the split run; nothing else is taken
    from the federated code.
    """
    from fedclaims.vfl import batch_schedule

    parts = [w.train for w in sorted(plan.workers, key=lambda w: w.id)]
    x = np.hstack([p.features for p in parts])
    y = plan.label_holder().train.labels
    layers, acts = block_monolith(heads, tail)
    mask = block_mask(heads, len(tail.layers))
    steps = []
    for epoch in range(1, plan.epochs + 1):
        for rows in batch_schedule(x.shape[0], plan.batch_size, plan.seed, epoch):
            layers, _ = monolith_step(layers, acts, mask, x[rows], y[rows], plan.learning_rate)
            steps.append(layers)
    return steps

"""Independent oracles shared by the test modules."""

import numpy as np

from repdet import tensor as T


def direct_conv(x, w, b, stride, pad):
    """Six nested loops over (n, c_out, i, j, c_in, ki/kj), float64."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else float(b[o])
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                yy, xx = i * stride + ki - pad, j * stride + kj - pad
                                if 0 <= yy < h and 0 <= xx < wd:
                                    s += float(x[b_, ci, yy, xx]) * float(w[o, ci, ki, kj])
                    out[b_, o, i, j] = s
    return out


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def tape_grads(build_loss, arrays):
    """Evaluate ``build_loss(*tensors)`` and return tape gradients."""
    ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(*ts)
    grads = T.backward(loss, ts)
    return float(loss.data.reshape(())), [grads[t].data for t in ts]


def randomize_model(m, seed=0, hw=64):
    """Give every BN non-trivial statistics and every bare prediction conv
    random weights, so equivalence checks exercise all parameters.

    Running statistics are first set to real batch statistics of random
    images (momentum 1), then perturbed, keeping activations O(1) the way a
    trained network's are.
    """
    from repdet.nn import BatchNorm, Conv, ConvBNAct
    from repdet.reparam import RepConv

    rng = np.random.default_rng(seed)
    owned = set()
    for _, sub in m.modules():
        if isinstance(sub, (ConvBNAct, RepConv)):
            for _, c in sub.modules():
                owned.add(id(c))
    bns = [sub for _, sub in m.modules() if isinstance(sub, BatchNorm)]
    for sub in bns:
        c = sub.gamma.data.shape[0]
        sub.gamma.data[...] = rng.uniform(0.5, 1.5, c)
        sub.beta.data[...] = rng.normal(0, 0.2, c)
    for _, sub in m.modules():
        if isinstance(sub, Conv) and id(sub) not in owned:
            sub.weight.data[...] = rng.normal(0, 0.05, sub.weight.data.shape)
            if sub.bias is not None:
                sub.bias.data[...] = rng.normal(0, 0.5, sub.bias.data.shape)
    saved = [b.momentum for b in bns]
    for b in bns:
        b.momentum = 1.0
    m.train()
    m.forward(T.Tensor(rng.random((4, 3, hw, hw)).astype(np.float32)))
    for b, mom in zip(bns, saved):
        b.momentum = mom
        c = b.running_mean.shape[0]
        b.running_mean[...] += rng.normal(0, 0.05, c).astype(np.float32)
        b.running_var[...] *= rng.uniform(0.8, 1.25, c).astype(np.float32)
    return m.eval()

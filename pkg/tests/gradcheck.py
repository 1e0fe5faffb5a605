"""Central finite-difference oracle, independent of the reverse pass."""
import numpy as np

from mmn.nn import Network, forward_pass, param_gradients

STEP = 1e-4


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def relu_pattern(net: Network, X):
    _, cache = net._forward(X, keep=True)
    return [a > 0 for a in cache.pre_relu]


def _mse(net, X, T):
    # batch norm running stats are irrelevant to the training-mode output
    return float(np.mean((forward_pass(net, X) - T) ** 2))


def fd_param_grads(net: Network, X, T, h=STEP):
    """Finite-difference gradients plus a mask of components whose +-h probe
    crosses a ReLU kink (those are excluded from comparison)."""
    return _fd_param_grads(net, X, T, h)


def fd_param_grads_extrapolated(net: Network, X, T, h=STEP):
    """Richardson-extrapolated central differences, (4 D(h/2) - D(h)) / 3.

    Batch norm on a tiny weight makes the loss curve on a scale close to h,
    where the plain O(h^2) truncation error alone reaches ~1e-4 relative.
    """
    coarse, ok = _fd_param_grads(net, X, T, h)
    fine, ok_fine = _fd_param_grads(net, X, T, h / 2)
    return ([(4 * f - c) / 3 for f, c in zip(fine, coarse)],
            [a & b for a, b in zip(ok, ok_fine)])


def _fd_param_grads(net: Network, X, T, h):
    base = relu_pattern(net, X)
    fd, ok = [], []
    for p in net.parameters():
        g = np.zeros_like(p)
        m = np.ones(p.shape, dtype=bool)
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + h
            lp, pat_p = _mse(net, X, T), relu_pattern(net, X)
            p[i] = orig - h
            lm, pat_m = _mse(net, X, T), relu_pattern(net, X)
            p[i] = orig
            g[i] = (lp - lm) / (2 * h)
            m[i] = all(np.array_equal(a, b) and np.array_equal(a, c)
                       for a, b, c in zip(base, pat_p, pat_m))
        fd.append(g)
        ok.append(m)
    return fd, ok


def fd_input_grad(net: Network, x, t, h=STEP):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    ok = np.ones_like(x, dtype=bool)
    base = relu_pattern(net, x[None])
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        fp = np.sum((forward_pass(net, (x + e)[None])[0] - t) ** 2)
        fm = np.sum((forward_pass(net, (x - e)[None])[0] - t) ** 2)
        g[i] = (fp - fm) / (2 * h)
        pats = [relu_pattern(net, (x + e)[None]), relu_pattern(net, (x - e)[None])]
        ok[i] = all(np.array_equal(a, b) for pat in pats for a, b in zip(base, pat))
    return g, ok


def random_net(rng, spec):
    net = Network.initialize(spec, rng, dtype=np.float64)
    for a in net.bn_scale:
        a[...] = rng.uniform(0.5, 1.5, a.shape)
    for a in net.bn_shift:
        a[...] = rng.normal(0, 0.5, a.shape)
    for a in net.running_mean:
        a[...] = rng.normal(0, 0.3, a.shape)
    for a in net.running_var:
        a[...] = rng.uniform(0.5, 2.0, a.shape)
    return net


def check_param_grads(net, X, T):
    """Worst relative error over kink-free components."""
    net.train()
    _, grads = param_gradients(net, X, T)
    fd, ok = fd_param_grads_extrapolated(net, X, T)
    worst = 0.0
    for g, f, m in zip(grads, fd, ok):
        if m.any():
            worst = max(worst, float(rel_err(g[m], f[m]).max()))
    return worst

"""Finite-difference gradient certification harness.

Each case builds fresh random inputs for a seed, rejects the seed if any
input sits within ``MARGIN`` of a kink, and compares backprop gradients of
``sum(R * op(inputs))`` against central differences.
"""
import numpy as np

from scoredist import autodiff as ad
from scoredist import distcore
from scoredist.model import BackboneConfig, HeadConfig, NetConfig, Network
from scoredist.spp import SPPConfig, adaptive_spp, cell_bounds, global_max_branch

import oracles

MARGIN = 1e-4
SETTINGS = {
    "float64": dict(h=1e-6, tol=1e-6),
    "float32": dict(h=1e-4, tol=1e-3),
}


def _region_gap(x, r0, r1, c0, c1):
    patch = np.sort(x[..., r0:r1, c0:c1].reshape(*x.shape[:-2], -1), axis=-1)
    if patch.shape[-1] < 2:
        return np.inf
    return float(np.min(patch[..., -1] - patch[..., -2]))


def _spp_gap(fmap, n):
    H, W = fmap.shape[-2:]
    return min(_region_gap(fmap, r0, r1, c0, c1) for r0, r1 in cell_bounds(H, n) for c0, c1 in cell_bounds(W, n))


def _graph_relu_margin(out):
    seen, stack, m = set(), [out], np.inf
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu":
            m = min(m, float(np.min(np.abs(node._parents[0].data))))
        stack.extend(node._parents)
    return m


class Case:
    """``make(rng, dtype)`` returns (inputs dict, fn) or None when the draw is too close to a kink."""

    def __init__(self, name, make):
        self.name = name
        self.make = make


def _conv(rng, dt):
    stride, pad = (1, 1) if rng.random() < 0.5 else (2, 1)
    ins = {"x": rng.standard_normal((2, 3, 6, 7)), "w": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)}
    return ins, lambda t: ad.conv2d(t["x"], t["w"], t["b"], stride, pad)


def _relu(rng, dt):
    x = rng.standard_normal(30)
    if np.min(np.abs(x)) < MARGIN:
        return None
    return {"x": x}, lambda t: ad.relu(t["x"])


def _linear(rng, dt):
    ins = {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((5, 4)), "b": rng.standard_normal(4)}
    return ins, lambda t: ad.linear(t["x"], t["w"], t["b"])


def _maxpool(rng, dt):
    x = rng.standard_normal((3, 6, 7))
    r0 = int(rng.integers(0, 5))
    r1 = int(rng.integers(r0 + 1, 7))
    c0 = int(rng.integers(0, 6))
    c1 = int(rng.integers(c0 + 1, 8))
    if _region_gap(x, r0, r1, c0, c1) < MARGIN:
        return None
    return {"x": x}, lambda t: ad.max_pool_region(t["x"], r0, r1, c0, c1)


def _l2(rng, dt):
    return {"x": rng.standard_normal(12)}, lambda t: ad.l2_normalize(t["x"])


def _softmax(rng, dt):
    return {"x": rng.standard_normal(10) * 2}, lambda t: ad.softmax(t["x"])


def _xent(rng, dt):
    target = rng.random(10)
    target /= target.sum()
    return {"z": rng.standard_normal(10) * 2}, lambda t: ad.cross_entropy_soft(t["z"], target)


def _huber(rng, dt):
    p = rng.random((2, 10)) * 0.4
    g = rng.random((2, 10))
    g /= g.sum(axis=1, keepdims=True)
    delta = distcore.HuberConfig().delta
    if np.min(np.abs(np.abs(p - g) - delta)) < MARGIN:
        return None
    return {"p": p}, lambda t: ad.huber(t["p"], g, delta)


def _spp(rng, dt):
    fmap = rng.standard_normal((4, 7, 8))
    if _spp_gap(fmap, 3) < MARGIN or _region_gap(fmap, 0, 7, 0, 8) < MARGIN:
        return None
    return {"f": fmap}, lambda t: ad.concat([adaptive_spp(t["f"], SPPConfig(3, 4)), global_max_branch(t["f"])])


def tiny_net(seed, dtype="float64", variant="dist"):
    cfg = NetConfig(BackboneConfig(channels=(3, 4)), HeadConfig(hidden=6, variant=variant), spp_n=2, dtype=dtype)
    net = Network(cfg, seed=seed)
    # non-trivial final layer so gradients reach every parameter
    rng = np.random.default_rng([seed, 99])
    for k in ("head.fc2.w", "gmp.fc2.w"):
        if k in net.params:
            net.params[k].data[...] = rng.standard_normal(net.params[k].shape) * 0.5
    # positive conv biases keep most units active, so few pooling cells tie at zero
    for k in ("conv0.b", "conv1.b"):
        net.params[k].data[...] = 0.5 + 0.1 * rng.standard_normal(net.params[k].shape)
    return net


def _network(rng, dt):
    seed = int(rng.integers(1 << 30))
    net = tiny_net(seed, dt)
    x = rng.random((1, 3, 10, 12))
    g = rng.random(10)
    g /= g.sum()
    delta = distcore.HuberConfig().delta
    xt = ad.Tensor(x.astype(dt), requires_grad=True)
    fmap = net.features(xt)
    out = net.forward(xt)
    if _graph_relu_margin(out) < MARGIN or _spp_gap(fmap.data, 2) < MARGIN:
        return None
    if np.min(np.abs(np.abs(out.data[0].astype(np.float64) - g) - delta)) < MARGIN:
        return None
    ins = {"x": x, **{k: v.data.astype(np.float64) for k, v in net.params.items()}}

    def fn(t):
        for k, v in t.items():
            if k != "x":
                net.params[k] = v
        return ad.huber(net.forward(t["x"]), g[None], delta)

    return ins, fn


CASES = [
    Case("conv2d", _conv),
    Case("relu", _relu),
    Case("linear", _linear),
    Case("max_pool_region", _maxpool),
    Case("l2_normalize", _l2),
    Case("softmax", _softmax),
    Case("cross_entropy_soft", _xent),
    Case("huber", _huber),
    Case("spp_full", _spp),
    Case("network", _network),
]


def check_once(inputs, fn, dtype, h, rng, fd_dtype=None):
    """Worst relative error of backprop (in ``dtype``) against central differences.

    The difference quotient is evaluated at the same ``dtype``-rounded input
    points, with the forward pass run in ``fd_dtype`` (default: ``dtype``).
    A float32 forward pass resolves the loss only to ~1e-7 relative, which is
    the same order as h * gradient at h = 1e-4, so the 32-bit certification
    uses a 64-bit forward for the reference.
    """
    dt = np.dtype(dtype)
    fdt = np.dtype(fd_dtype or dtype)
    arrays = {k: np.array(v, dtype=dt) for k, v in inputs.items()}
    tensors = {k: ad.Tensor(a, requires_grad=True) for k, a in arrays.items()}
    out = fn(tensors)
    R = rng.standard_normal(out.shape)
    loss = ad.tsum(ad.mul(out, R.astype(dt)))
    loss.backward()
    worst = 0.0
    for k in arrays:
        plain = {kk: ad.Tensor(aa.astype(fdt)) for kk, aa in arrays.items()}

        def f():
            with ad.no_grad():
                return float(np.sum(fn(plain).data.astype(np.float64) * R))

        num = oracles.numeric_grad(f, plain[k].data, h)
        worst = max(worst, oracles.rel_error(tensors[k].grad, num))
    return worst


def certify(case: Case, dtype="float64", n_seeds=20, max_draws=400, fd_dtype="float64"):
    """Return (max relative error over accepted seeds, number accepted)."""
    s = SETTINGS[dtype]
    worst, accepted = 0.0, 0
    for seed in range(max_draws):
        rng = np.random.default_rng([seed, 7])
        made = case.make(rng, dtype)
        if made is None:
            continue
        inputs, fn = made
        worst = max(worst, check_once(inputs, fn, dtype, s["h"], rng, fd_dtype))
        accepted += 1
        if accepted >= n_seeds:
            break
    return worst, accepted

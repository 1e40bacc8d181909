"""Central finite-difference checks of every differentiable op.

The analytic gradient comes from the float32 backward pass.  The numeric
side re-runs the same graph in float64 with the leaf coordinate moved by
+-STEP, so the oracle's own rounding stays far below the tolerance.  A
coordinate whose two evaluations fall on different sides of a ReLU kink is
not differentiable at that step size and is replaced by a fresh sample.

A coordinate passes when ``|analytic - numeric| <= max(ATOL, RTOL * max(|a|, |n|))``.
"""
from dataclasses import dataclass

import numpy as np

from . import losses
from . import tensor as T
from .networks import disc_forward, init_discriminator
from .tensor import Tensor

STEP = 1e-3
RTOL = 1e-2
ATOL = 1e-4
MIN_COORDS = 20


@dataclass
class CheckResult:
    op: str
    seed: int
    n_coords: int
    n_failed: int
    max_abs_err: float
    max_rel_err: float
    n_kinked: int = 0

    @property
    def passed(self):
        return self.n_failed == 0


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float32), requires_grad=True)


def _project(rng, shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32))


def _pick_coords(leaves, rng, n):
    """At least one coordinate per leaf, the rest spread by size."""
    sizes = np.array([leaf.size for leaf in leaves])
    picks = [(i, int(rng.integers(s))) for i, s in enumerate(sizes)]
    probs = sizes / sizes.sum()
    while len(picks) < n:
        i = int(rng.choice(len(leaves), p=probs))
        picks.append((i, int(rng.integers(sizes[i]))))
    return picks


def _evaluate(loss_fn, leaves, i, flat, delta):
    saved = [leaf.data for leaf in leaves]
    try:
        with T.precision(np.float64), T.record_kinks() as kinks:
            for leaf in leaves:
                leaf.data = leaf.data.astype(np.float64)
            leaves[i].data.reshape(-1)[flat] += delta
            value = loss_fn().item()
    finally:
        for leaf, data in zip(leaves, saved):
            leaf.data = data
    return value, kinks


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check(op, build, seed, n_coords=MIN_COORDS, step=STEP):
    """``build(rng)`` returns (loss_fn, leaves); loss_fn() rebuilds the scalar loss."""
    rng = np.random.default_rng(seed)
    loss_fn, leaves = build(rng)
    for leaf in leaves:
        leaf.grad = None
    T.backward(loss_fn())
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    failed = checked = kinked = 0
    max_abs = max_rel = 0.0
    candidates = _pick_coords(leaves, rng, n_coords * 20)
    for i, flat in candidates:
        if checked >= n_coords:
            break
        up, kinks_up = _evaluate(loss_fn, leaves, i, flat, step)
        down, kinks_down = _evaluate(loss_fn, leaves, i, flat, -step)
        if not _same_branches(kinks_up, kinks_down):
            kinked += 1
            continue
        checked += 1
        numeric = (up - down) / (2.0 * step)
        a = float(analytic[i].reshape(-1)[flat])
        err = abs(a - numeric)
        scale = max(abs(a), abs(numeric))
        max_abs = max(max_abs, err)
        if scale > 0:
            max_rel = max(max_rel, err / scale)
        if err > max(ATOL, RTOL * scale):
            failed += 1
    failed += max(0, n_coords - checked)
    return CheckResult(op, seed, checked, failed, max_abs, max_rel, kinked)


# --- suites -----------------------------------------------------------------


def _unary(fn, shape, lo=-1.0, hi=1.0):
    def build(rng):
        x = _leaf(rng, shape, lo, hi)
        r = _project(rng, fn(x).shape)
        return (lambda: T.tsum(T.mul(fn(x), r))), [x]
    return build


def _binary(fn, shape):
    def build(rng):
        a, b = _leaf(rng, shape), _leaf(rng, shape)
        r = _project(rng, shape)
        return (lambda: T.tsum(T.mul(fn(a, b), r))), [a, b]
    return build


def _conv(stride, padding, dilation, cin=2, cout=3, k=4, size=6):
    def build(rng):
        x = _leaf(rng, (1, cin, size, size))
        w = _leaf(rng, (cout, cin, k, k), -0.5, 0.5)
        b = _leaf(rng, (cout,))
        out_shape = T.conv2d(x, w, b, stride, padding, dilation).shape
        r = _project(rng, out_shape)
        return (lambda: T.tsum(T.mul(T.conv2d(x, w, b, stride, padding, dilation), r))), [x, w, b]
    return build


def _leaky(rng):
    # keep inputs away from the kink so the central difference is smooth
    x = rng.uniform(0.05, 1.0, (2, 3, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4))
    x = Tensor(x.astype(np.float32), requires_grad=True)
    r = _project(rng, x.shape)
    return (lambda: T.tsum(T.mul(T.leaky_relu(x, 0.2), r))), [x]


def _relu(rng):
    x = rng.uniform(0.05, 1.0, (2, 3, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4))
    x = Tensor(x.astype(np.float32), requires_grad=True)
    r = _project(rng, x.shape)
    return (lambda: T.tsum(T.mul(T.relu(x), r))), [x]


def _softmax(rng):
    x = _leaf(rng, (1, 4, 3, 3), -2, 2)
    r = _project(rng, x.shape)
    return (lambda: T.tsum(T.mul(T.softmax_channels(x), r))), [x]


def _upsample(rng):
    x = _leaf(rng, (1, 2, 2, 2))
    r = _project(rng, (1, 2, 5, 7))
    return (lambda: T.tsum(T.mul(T.upsample_bilinear(x, 5, 7), r))), [x]


def _prob_leaf(rng, shape):
    return _leaf(rng, shape, 0.1, 0.9)


def _seg_loss(rng):
    logits = _leaf(rng, (1, 3, 4, 4), -2, 2)
    labels = rng.integers(0, 3, (1, 4, 4))
    labels[0, 0, 0] = losses.IGNORE_LABEL
    return (lambda: losses.seg_loss(T.softmax_channels(logits), labels)), [logits]


def _sigma_loss(fn):
    def build(rng):
        s = _prob_leaf(rng, (1, 1, 3, 3))
        return (lambda: fn(s)), [s]
    return build


def _composite(mode, size, widths=(4, 4, 4, 4, 4), n_classes=2, gan="vanilla"):
    """Full generator objective of one trainer step on a toy network."""
    def build(rng):
        from .trainer import TrainConfig, Trainer

        cfg = TrainConfig(mode=mode, gan=gan, n_classes=n_classes, widths=widths,
                          total_steps=1, seed=int(rng.integers(1 << 30)),
                          lambda_adv=(0.5,) * (2 if mode == "multi_level" else 1))
        tr = Trainer(cfg)
        for d in tr.D:
            d.set_requires_grad(False)
        img_s = Tensor(rng.uniform(0, 1, (1, 3, size, size)).astype(np.float32))
        img_t = Tensor(rng.uniform(0, 1, (1, 3, size, size)).astype(np.float32))
        labels = rng.integers(0, n_classes, (1, size, size))

        def loss_fn():
            return tr.g_objective(img_s, labels, img_t if mode != "source_only" else None)[0]

        return loss_fn, list(tr.trainable_g())
    return build


def _disc(rng):
    d = init_discriminator(int(rng.integers(1 << 30)), 2)
    x = Tensor(rng.uniform(0, 1, (1, 2, 32, 32)).astype(np.float32))
    return (lambda: losses.disc_loss(disc_forward(d, x), losses.TARGET)), list(d)


SUITES = {
    "conv2d": [_conv(2, 1, 1), _conv(1, 0, 1, k=3), _conv(1, 1, 1, k=3), _conv(1, 2, 2, k=3),
               _conv(1, 4, 4, k=3, size=8), _conv(2, 1, 1, k=3)],
    "leaky_relu": [_leaky],
    "relu": [_relu],
    "sigmoid": [_unary(T.sigmoid, (2, 3, 4), -3, 3)],
    "softmax_channels": [_softmax],
    "upsample_bilinear": [_upsample],
    "add": [_binary(T.add, (2, 3))],
    "sub": [_binary(T.sub, (2, 3))],
    "mul": [_binary(T.mul, (2, 3))],
    "scale": [_unary(lambda x: T.scale(x, -1.7), (2, 3))],
    "log": [_unary(T.log, (2, 3), 0.2, 2.0)],
    "square": [_unary(T.square, (2, 3))],
    "sum": [_unary(T.tsum, (3, 4))],
    "mean": [_unary(T.mean, (3, 4))],
    "seg_loss": [_seg_loss],
    "disc_loss": [_sigma_loss(lambda s: losses.disc_loss(s, losses.SOURCE)),
                  _sigma_loss(lambda s: losses.disc_loss(s, losses.TARGET))],
    "adv_loss": [_sigma_loss(losses.adv_loss)],
    "ls_disc_loss": [_sigma_loss(lambda s: losses.ls_disc_loss(s, losses.SOURCE)),
                     _sigma_loss(lambda s: losses.ls_disc_loss(s, losses.TARGET))],
    "ls_adv_loss": [_sigma_loss(losses.ls_adv_loss)],
    "discriminator": [_disc],
    "g_loss": [_composite("source_only", 8), _composite("single_level", 32),
               _composite("multi_level", 32), _composite("feature", 32),
               _composite("single_level", 32, gan="least_squares")],
}


def run(ops=None, seeds=(0, 1, 2), n_coords=MIN_COORDS, suites=None):
    suites = suites or SUITES
    names = list(suites) if not ops else list(ops)
    unknown = [n for n in names if n not in suites]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}")
    results = []
    for name in names:
        for seed in seeds:
            for k, build in enumerate(suites[name]):
                results.append(check(name, build, seed * 100 + k, n_coords))
    return results


def format_table(results):
    lines = [f"{'op':<20}{'seed':>6}{'coords':>8}{'kinked':>8}{'failed':>8}{'max_abs':>12}"
             f"{'max_rel':>12}  status"]
    for r in results:
        lines.append(f"{r.op:<20}{r.seed:>6}{r.n_coords:>8}{r.n_kinked:>8}{r.n_failed:>8}"
                     f"{r.max_abs_err:>12.3e}{r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

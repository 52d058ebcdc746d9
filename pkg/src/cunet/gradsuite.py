"""Finite-difference checks over every differentiable op and a composed cascade loss.

Each case builds fresh random inputs from a seed, reduces the op output to a
scalar with fixed random probe weights, and compares reverse-mode gradients to
central differences. Ops with kinks (relu, max pooling, anything containing them)
skip positions whose perturbation changes a branch.
"""

import numpy as np

from . import lws
from . import tensor as T
from .gradcheck import finite_difference_check, relative_error
from .model import CUNet, CUNetConfig
from .train import TrainConfig, cascade_loss, sample_weights


def _leaf(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def _probe(rng, t):
    r = T.Tensor(rng.standard_normal(t.shape))
    return lambda out: (out * r).sum()


def _unary(rng, name, op, *shape):
    a = _leaf(rng, *shape)
    p = _probe(rng, op(a))
    return name, lambda: p(op(a)), [a]


def _binary(rng, name, op, shape_a, shape_b):
    a, b = _leaf(rng, *shape_a), _leaf(rng, *shape_b)
    p = _probe(rng, op(a, b))
    return name, lambda: p(op(a, b)), [a, b]


def _conv_case(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, k, bias = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    p = _probe(rng, T.conv2d(x, k, bias, stride, pad))
    return "conv2d", lambda: p(T.conv2d(x, k, bias, stride, pad)), [x, k, bias]


def _deconv_case(rng):
    s = int(rng.integers(1, 4))
    x, k, bias = _leaf(rng, 2, 3, 3, 4), _leaf(rng, 3, 2, 2 * s, 2 * s), _leaf(rng, 2)
    p = _probe(rng, T.transposed_conv2d(x, k, s, bias))
    return "transposed_conv2d", lambda: p(T.transposed_conv2d(x, k, s, bias)), [x, k, bias]


def _wce_case(rng, via_logits):
    logits = _leaf(rng, 2, 3, 4, 4)
    target = lws.one_hot(rng.integers(3, size=(2, 4, 4)), 3)
    w = rng.random((2, 4, 4)) * (rng.random((2, 4, 4)) < 0.7) * 2
    w[0, 0, 0] = 1.0
    if via_logits:
        return "weighted_cross_entropy", lambda: lws.weighted_cross_entropy(T.softmax_channels(logits), target, w), [logits]
    # multiplying by 1 hides the logits and forces the floored-probability path
    fn = lambda: lws.weighted_cross_entropy(T.softmax_channels(logits) * 1.0, target, w)  # noqa: E731
    return "weighted_cross_entropy_probs", fn, [logits]


def _op_cases(rng):
    """(name, scalar function of the leaves, leaves) for every differentiable op."""
    return [
        _binary(rng, "elementwise_add", T.elementwise_add, (2, 3, 4, 4), (2, 3, 4, 4)),
        _binary(rng, "elementwise_mul", T.elementwise_mul, (2, 3, 4, 4), (2, 3, 4, 4)),
        _unary(rng, "square_sum", T.square_sum, 3, 5),
        _unary(rng, "relu", T.relu, 2, 3, 5, 5),
        _binary(rng, "channel_concat", T.channel_concat, (2, 2, 4, 4), (2, 3, 4, 4)),
        _unary(rng, "softmax_channels", lambda a: T.softmax_channels(a) * 1.0, 2, 4, 3, 3),
        _unary(rng, "max_pool2", T.max_pool2, 2, 3, 6, 6),
        _conv_case(rng),
        _deconv_case(rng),
        _wce_case(rng, True),
        _wce_case(rng, False),
    ]


def _phantom_batch(rng, size, batch):
    labels = np.zeros((batch, size, size), dtype=np.uint8)
    brain = np.zeros((batch, size, size), dtype=bool)
    brain[:, 1:-1, 1:-1] = True
    for i in range(batch):
        r, c = rng.integers(1, size // 2, size=2)
        labels[i, r : r + size // 3, c : c + size // 3] = 2
        labels[i, r + 1 : r + 3, c + 1 : c + 3] = rng.choice([1, 4])
    return labels, brain


def composed_case(rng, seed, depth=2, base=4, size=8, batch=2):
    """Cascade loss of a tiny CU-Net with LWS weights; leaves are the input and a spread of parameters."""
    model = CUNet(CUNetConfig(depth=depth, base_channels=base, seed=seed))
    for name, t in model.params:
        # give the zero-initialized residual branches a small He-scaled start so every path carries gradient
        if name.endswith("conv2.w"):
            t.data[...] = 0.5 * rng.standard_normal(t.data.shape) * np.sqrt(2.0 / (t.data[0].size))
        elif name.endswith(".b"):
            t.data[...] = 0.1 * rng.standard_normal(t.data.shape)
    labels, brain = _phantom_batch(rng, size, batch)
    w1, w2 = sample_weights(labels, brain, TrainConfig(contour_width=2), rng)
    x = T.Tensor(rng.standard_normal((batch, 4, size, size)), requires_grad=True)

    def fn():
        loss, _ = cascade_loss(model(x), labels, w1, w2, 0.1, depth)
        return loss

    picked = ["u1.enc0.conv1.w", "u1.enc0.conv2.w", "u1.up0.w", "u1.aux1.out.b", "u2.enc1.conv1.w", "u2.head.w"]
    return fn, [x] + [model.params[n] for n in picked]


def resolution_floor(value, step, tol=1e-4):
    """Smallest gradient magnitude a central difference can confirm to ``tol`` relative error.

    Evaluating ``fn`` rounds at about ``eps * |value|``, so the difference quotient
    carries noise near ``4 * eps * |value| / (2 * step)``.
    """
    return 4 * np.finfo(float).eps * max(abs(value), 1.0) / (2 * step) / tol


def _check(fn, leaves, rng, step, per_leaf):
    worst, worst_resolved, skipped, unresolved = 0.0, 0.0, 0, 0
    for leaf in leaves:
        size = leaf.data.size
        idx = None if per_leaf is None or size <= per_leaf else rng.choice(size, per_leaf, replace=False)
        details = []
        err, sk = finite_difference_check(lambda _: fn(), leaf, step, indices=idx, skip_kinks=True, details=details)
        for other in leaves:
            other.grad = None
        worst, skipped = max(worst, err), skipped + sk
        for _, numeric, analytic, value in details:
            if max(abs(numeric), abs(analytic)) < resolution_floor(value, step):
                unresolved += 1
            else:
                worst_resolved = max(worst_resolved, float(relative_error(numeric, analytic)))
    return worst, worst_resolved, skipped, unresolved


def run_gradient_suite(seeds=range(50), step=1e-5, per_leaf=12, log=None):
    """Finite-difference results per case, maximized over ``seeds``.

    Returns ``{case: {...}}`` with ``max_rel_error`` over every compared position,
    ``max_rel_error_resolved`` over positions above :func:`resolution_floor`, the
    count of positions below it (``unresolved``), kink skips and seeds checked.
    """
    results = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = _op_cases(rng)
        fn, leaves = composed_case(rng, seed)
        cases.append(("cunet_loss", fn, leaves))
        for name, fn, leaves in cases:
            err, resolved, skipped, unresolved = _check(fn, leaves, rng, step, per_leaf if name == "cunet_loss" else None)
            r = results.setdefault(
                name,
                {"max_rel_error": 0.0, "max_rel_error_resolved": 0.0, "unresolved": 0, "skipped": 0, "checked_seeds": 0},
            )
            r["max_rel_error"] = max(r["max_rel_error"], err)
            r["max_rel_error_resolved"] = max(r["max_rel_error_resolved"], resolved)
            r["unresolved"] += unresolved
            r["skipped"] += skipped
            r["checked_seeds"] += 1
        if log:
            log(f"seed {seed}: worst so far {max(r['max_rel_error'] for r in results.values()):.2e}")
    return results

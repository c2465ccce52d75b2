"""Central finite-difference checks for every layer and for the full model."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .loss import cce_grad_logits
from .model import MsNetArch, init_model, param_layout

EPS = 1e-5
FLOOR = 1e-8
TOLERANCE = 1e-5

SHRUNK_ARCH = MsNetArch(input_channels=8, block_channels=4)


def numerical_gradient(f, x, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=FLOOR):
    """Worst absolute discrepancy scaled by the tensor's largest gradient entry.

    Scaling per tensor rather than per entry keeps finite-difference roundoff
    on near-zero entries from reading as a failure.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def check_conv(rng, l, cin, cout, k, dilation):
    x = rng.normal(size=(l, cin))
    w = rng.normal(size=(k, cin, cout))
    b = rng.normal(size=cout)
    r = rng.normal(size=(l, cout))
    f = lambda: float(np.sum(T.conv1d_forward(x, w, b, dilation) * r))
    g = T.conv1d_backward(x, w, dilation, r)
    err = max(relative_error(g.d_input, numerical_gradient(f, x)),
              relative_error(g.d_weight, numerical_gradient(f, w)),
              relative_error(g.d_bias, numerical_gradient(f, b)))
    return GradCheckResult(f"conv1d l={l} cin={cin} cout={cout} k={k} d={dilation}", err)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def check_relu(rng, l, c):
    x = _away_from_zero(rng, (l, c))
    r = rng.normal(size=(l, c))
    f = lambda: float(np.sum(T.relu_forward(x) * r))
    return GradCheckResult(f"relu l={l} c={c}",
                           relative_error(T.relu_backward(x, r), numerical_gradient(f, x)))


def check_maxpool(rng, l, c):
    # distinct values spaced well beyond eps so the argmax cannot flip
    x = rng.permutation(l * c).reshape(l, c) * 0.01 + rng.uniform(0, 1e-3, size=(l, c))
    r = rng.normal(size=c)
    f = lambda: float(T.global_maxpool_forward(x)[0] @ r)
    _, idx = T.global_maxpool_forward(x)
    return GradCheckResult(f"maxpool l={l} c={c}",
                           relative_error(T.global_maxpool_backward(idx, r, l), numerical_gradient(f, x)))


def check_dense(rng, n, m):
    x, w, b, r = rng.normal(size=n), rng.normal(size=(n, m)), rng.normal(size=m), rng.normal(size=m)
    f = lambda: float(T.dense_forward(x, w, b) @ r)
    g = T.dense_backward(x, w, r)
    err = max(relative_error(g.d_input, numerical_gradient(f, x)),
              relative_error(g.d_weight, numerical_gradient(f, w)),
              relative_error(g.d_bias, numerical_gradient(f, b)))
    return GradCheckResult(f"dense n={n} m={m}", err)


def layer_checks(n_cases=100, seed=0):
    """Randomised per-layer checks; cycles through every length and dilation of interest."""
    rng = np.random.default_rng(seed)
    lengths, dilations = (1, 2, 31, 100), (1, 2, 4, 8)
    results = []
    for i in range(n_cases):
        l = lengths[i % len(lengths)]
        kind = i % 4
        if kind == 0 or kind == 3:
            d = dilations[(i // len(lengths)) % len(dilations)]
            results.append(check_conv(rng, l, int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                                      int(rng.choice([1, 3, 5])), d))
        elif kind == 1:
            results.append(check_relu(rng, l, int(rng.integers(1, 5))))
        else:
            results.append(check_maxpool(rng, l, int(rng.integers(1, 5))))
        if i % 5 == 0:
            results.append(check_dense(rng, int(rng.integers(1, 8)), int(rng.integers(1, 8))))
    return results


def model_check(arch=SHRUNK_ARCH, length=40, seed=0, label=None, weights=(1.0, 1.5, 0.7)):
    """Analytic full-model gradient against central differences of the weighted loss."""
    rng = np.random.default_rng(seed)
    model = init_model(arch, seed=seed)
    # non-zero biases so every code path carries signal
    p = model.params.copy()
    p += 0.05 * rng.normal(size=p.size)
    model.set_params(p)
    x = rng.normal(size=(length, arch.input_channels))
    y = int(rng.integers(arch.classes)) if label is None else label
    w = np.asarray(weights, float)

    probs, cache = model.forward(x)
    analytic = model.backward(cache, cce_grad_logits(probs, y, w))

    def f():
        # exact log-softmax: the 1e-12 clamp in weighted_cce would flatten confident outputs
        model.set_params(p)
        z = model.logits(x)
        zmax = z.max()
        return -w[y] * (z[y] - zmax - np.log(np.sum(np.exp(z - zmax))))

    numeric = numerical_gradient(f, p)
    err, offset = 0.0, 0
    for _, shape in param_layout(arch):
        n = int(np.prod(shape))
        err = max(err, relative_error(analytic[offset:offset + n], numeric[offset:offset + n]))
        offset += n
    return GradCheckResult(f"model l={length} arch={arch}", err)

"""Central finite-difference verification of the hand-written backward passes.

Checks run in float64 so that differencing noise stays far below the
tolerances; the code paths under test are the same ones the float32 network
uses.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from crackcnn import layers as L
from crackcnn.tensor import make_rng


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


class Layer:
    """Adapter giving every layer the same ``forward``/``backward`` signature.

    ``forward(x, params) -> y`` and ``backward(x, params, dy) -> (dx, {name: dparam})``.
    """

    name = "layer"

    def forward(self, x, params):
        raise NotImplementedError

    def backward(self, x, params, dy):
        raise NotImplementedError


class Conv(Layer):
    name = "conv"

    def forward(self, x, params):
        return L.conv2d_forward(x, L.ConvParams(params["weight"], params["bias"]))[0]

    def backward(self, x, params, dy):
        _, cache = L.conv2d_forward(x, L.ConvParams(params["weight"], params["bias"]))
        dx, dw, db = L.conv2d_backward(dy, cache)
        return dx, {"weight": dw, "bias": db}


class MaxPool(Layer):
    name = "maxpool"

    def forward(self, x, params):
        return L.maxpool_forward(x, 3, 2, need_argmax=False)[0]

    def backward(self, x, params, dy):
        return L.maxpool_backward(dy, L.maxpool_forward(x, 3, 2)[1]), {}


class Relu(Layer):
    name = "relu"

    def forward(self, x, params):
        return L.relu_forward(x)

    def backward(self, x, params, dy):
        return L.relu_backward(x, dy), {}


class Lrn(Layer):
    name = "lrn"

    def __init__(self, p: L.LrnParams = L.LrnParams()):
        self.p = p

    def forward(self, x, params):
        return L.lrn_forward(x, self.p)[0]

    def backward(self, x, params, dy):
        return L.lrn_backward(dy, L.lrn_forward(x, self.p)[1]), {}


class Fc(Layer):
    name = "fc"

    def forward(self, x, params):
        return L.fc_forward(x, L.FcParams(params["weight"], params["bias"]))[0]

    def backward(self, x, params, dy):
        _, cache = L.fc_forward(x, L.FcParams(params["weight"], params["bias"]))
        dx, dw, db = L.fc_backward(dy, cache)
        return dx, {"weight": dw, "bias": db}


class SoftmaxCrossEntropy(Layer):
    """Scalar mean cross-entropy of ``softmax(x)`` against fixed labels."""

    name = "softmax+loss"

    def __init__(self, labels):
        self.labels = np.asarray(labels)

    def forward(self, x, params):
        from crackcnn.training import cross_entropy_loss

        return np.asarray(cross_entropy_loss(L.softmax(x), self.labels)[0])

    def backward(self, x, params, dy):
        from crackcnn.training import cross_entropy_loss

        return dy * cross_entropy_loss(L.softmax(x), self.labels)[1], {}


def gradient_errors(layer: Layer, x: np.ndarray, params: dict | None = None, epsilon: float = 1e-3, seed: int = 0) -> dict:
    """Max relative error per tensor (``"input"`` plus each parameter name).

    The layer output is reduced to a scalar with fixed random weights, the
    analytic gradient comes from ``layer.backward`` and the numeric one from
    central differences over every element.
    """
    x = np.array(x, dtype=np.float64)
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()}
    y = layer.forward(x, params)
    proj = make_rng(seed).standard_normal(np.shape(y))

    def objective():
        return float(np.sum(proj * layer.forward(x, params)))

    dx, dparams = layer.backward(x, params, proj)
    targets = [("input", x, dx)] + [(k, params[k], dparams[k]) for k in params]
    errors = {}
    for name, arr, analytic in targets:
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = objective()
            flat[i] = orig - epsilon
            fm = objective()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * epsilon)
        errors[name] = float(relative_error(np.asarray(analytic, dtype=np.float64), numeric).max())
    return errors


def finite_difference_check(layer: Layer, x: np.ndarray, params: dict | None = None, epsilon: float = 1e-3, seed: int = 0) -> float:
    """Max relative error over the input and every parameter of ``layer``."""
    return max(gradient_errors(layer, x, params, epsilon, seed).values())


def network_gradient_errors(net, x: np.ndarray, labels, epsilon: float = 1e-5) -> dict:
    """Per-parameter max relative error of ``net.backward`` against the mean loss."""
    from crackcnn.training import cross_entropy_loss

    net = type(net)(net.config, {k: v.astype(np.float64) for k, v in net.params.items()})
    x = np.asarray(x, dtype=np.float64)

    def loss():
        return cross_entropy_loss(net.forward(x)[1], labels)[0]

    _, probs = net.forward(x, train=True)
    _, dlogits = cross_entropy_loss(probs, labels)
    grads = net.backward(dlogits)
    errors = {}
    for name, p in net.params.items():
        flat = p.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss()
            flat[i] = orig - epsilon
            lm = loss()
            flat[i] = orig
            numeric[i] = (lp - lm) / (2 * epsilon)
        errors[name] = float(relative_error(grads[name].reshape(-1), numeric).max())
    return errors


# --------------------------------------------------------------------------
# suite


@dataclass
class GradResult:
    name: str
    max_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


def _distinct(rng, shape, spacing=0.05):
    # well separated values so no perturbation flips a max
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape) + rng.uniform(0, spacing / 10, shape)


def _away_from_kink(rng, shape, margin=0.1):
    mag = rng.uniform(margin, 1.0, shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def tiny_network(seed: int = 0, lrn=L.LrnParams(alpha=0.05)):
    """8x8-input network with the full layer sequence and small widths."""
    from crackcnn.network import build_network

    rng = make_rng(seed)
    net = build_network(2, True, rng, input_shape=(3, 8, 8), conv_channels=(4, 8), hidden=16, lrn=lrn)
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p[...] = rng.uniform(-0.1, 0.1, p.shape)
    return net


def run_gradient_suite(seed: int = 0, layers: dict[str, Layer] | None = None) -> list[GradResult]:
    """Per-layer checks (threshold 1e-3) and the end-to-end tiny-network check (1e-2).

    ``layers`` may replace any of the default adapters by name, e.g. to
    plug in a deliberately broken backward pass.
    """
    rng = make_rng(seed)
    impl = {
        "conv": Conv(),
        "maxpool": MaxPool(),
        "relu": Relu(),
        "lrn": Lrn(L.LrnParams(depth_radius=2, bias=2.0, alpha=0.05, beta=0.75)),
        "fc": Fc(),
        "softmax+loss": None,
    }
    impl.update(layers or {})
    labels = rng.integers(0, 3, 4)
    cases = {
        "conv": (rng.standard_normal((1, 2, 5, 5)), {"weight": rng.standard_normal((3, 2, 3, 3)), "bias": rng.standard_normal(3)}),
        "maxpool": (_distinct(rng, (1, 2, 5, 5)), {}),
        "relu": (_away_from_kink(rng, (2, 3, 4, 4)), {}),
        "lrn": (rng.standard_normal((2, 8, 4, 4)) * 2, {}),
        "fc": (rng.standard_normal((3, 6)), {"weight": rng.standard_normal((4, 6)), "bias": rng.standard_normal(4)}),
        "softmax+loss": (rng.standard_normal((4, 3)) * 2, {}),
    }
    results = []
    for name, (x, params) in cases.items():
        layer = impl[name] if impl[name] is not None else SoftmaxCrossEntropy(labels)
        err = finite_difference_check(layer, x, params, epsilon=1e-3, seed=seed)
        results.append(GradResult(name, err, 1e-3))

    net = tiny_network(seed)
    x = make_rng(seed + 1).random((2, 3, 8, 8))
    errs = network_gradient_errors(net, x, np.array([0, 1]))
    results.append(GradResult("end-to-end(8x8)", max(errs.values()), 1e-2))
    return results


def format_report(results: list[GradResult]) -> str:
    lines = [f"{r.name:<18} max_rel_err={r.max_error:.3e}  threshold={r.threshold:.0e}  {'PASS' if r.passed else 'FAIL'}" for r in results]
    return "\n".join(lines)

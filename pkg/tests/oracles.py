"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from qnn.layers import forward_batch
from qnn.training import backward


def ce_loss(model, xs, labels, weights=None):
    probs = forward_batch(model, xs, "float")
    p = np.take_along_axis(probs, labels[..., None], axis=2)[..., 0]
    w = np.ones(labels.shape) if weights is None else weights
    return float(-(w * np.log(p)).sum() / labels.size)


def finite_difference_check(model, xs, labels, eps=1e-5):
    """Worst elementwise relative error between analytic and central-difference gradients.

    Returns ``{tensor name: max relative error}``.  Relative error is
    ``|a - n| / max(|a|, |n|)``, with entries where both are below 1e-10 taken
    as exact.
    """
    _, acts = forward_batch(model, xs, "float", keep=True)
    _, grads = backward(model, (xs, labels), acts)
    worst = {}
    for name, param in model.named_params().items():
        numeric = np.empty_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up = ce_loss(model, xs, labels)
            param[idx] = old - eps
            down = ce_loss(model, xs, labels)
            param[idx] = old
            numeric[idx] = (up - down) / (2 * eps)
        a = grads[name]
        scale = np.maximum(np.abs(a), np.abs(numeric))
        rel = np.where(scale < 1e-10, 0.0, np.abs(a - numeric) / np.where(scale < 1e-10, 1.0, scale))
        worst[name] = float(rel.max())
    return worst

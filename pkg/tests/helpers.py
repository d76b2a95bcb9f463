"""Shared construction helpers for the test suite."""

import numpy as np

from tractmil import GatedAttentionModel, InstanceEmbedding, TractBag


def make_instances(rng, k, m, city="cityA", prefix="img"):
    return [
        InstanceEmbedding(
            image_id=f"{prefix}{j:04d}",
            lat=float(rng.uniform(-45, 45)),
            lon=float(rng.uniform(-90, 90)),
            city=city,
            features=rng.normal(size=m),
        )
        for j in range(k)
    ]


def make_bag(rng, k, m, label=1, tract_id="00000000001", income=None, city="cityA"):
    return TractBag(
        tract_id=tract_id,
        instances=make_instances(rng, k, m, city=city),
        label=label,
        income=income,
        city=city,
    )


def make_model(rng, m, l, scale=1.0):
    model = GatedAttentionModel.init_random(m, l, rng)
    model.V *= scale
    model.U *= scale
    model.w_attn *= scale
    model.w_clf *= scale
    return model


def reference_sigmoid(z):
    """Plain definition of the logistic function, branch on sign for stability."""
    import math

    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def finite_difference_gradients(bag, label, model, cfg, step=1e-5):
    """Central finite differences of the loss for every model parameter."""
    from tractmil import forward, loss

    def loss_at():
        return loss(forward(bag, model).logit, label, cfg)

    grads = {}
    for name in ("V", "U", "w_attn", "w_clf"):
        arr = getattr(model, name)
        out = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = loss_at()
            arr[idx] = orig - step
            lo = loss_at()
            arr[idx] = orig
            out[idx] = (hi - lo) / (2.0 * step)
        grads[name] = out
    orig = model.b
    model.b = orig + step
    hi = loss_at()
    model.b = orig - step
    lo = loss_at()
    model.b = orig
    grads["b"] = (hi - lo) / (2.0 * step)
    if model.has_fusion:
        orig = model.w_inc
        model.w_inc = orig + step
        hi = loss_at()
        model.w_inc = orig - step
        lo = loss_at()
        model.w_inc = orig
        grads["w_inc"] = (hi - lo) / (2.0 * step)
    return grads


def relative_error(a, b):
    """|a - b| with a unit floor in the denominator, so near-zero gradients are
    compared absolutely instead of amplifying finite-difference noise."""
    return abs(a - b) / max(1.0, abs(a), abs(b))


def max_gradient_mismatch(analytic, numeric):
    worst = 0.0
    for name, num in numeric.items():
        ana = {
            "V": analytic.dV,
            "U": analytic.dU,
            "w_attn": analytic.dw_attn,
            "w_clf": analytic.dw_clf,
            "b": analytic.db,
            "w_inc": analytic.dw_inc,
        }[name]
        if np.ndim(num) == 0:
            worst = max(worst, relative_error(float(ana), float(num)))
        else:
            for a, n in zip(np.ravel(ana), np.ravel(num)):
                worst = max(worst, relative_error(a, n))
    return worst

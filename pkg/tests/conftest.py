import numpy as np


def finite_diff_max_rel_err(params, loss_fn, coords_per_tensor=6, h=1e-4, seed=0):
    """Max relative error between stored analytic grads and central
    differences, sampled over random coordinates of every tensor.

    loss_fn() must re-evaluate the scalar loss at the current parameter
    values; each tensor's .grad must already hold the analytic gradient.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        grad = p.grad
        assert grad is not None, f"no gradient on {name}"
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad.reshape(-1)[i])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst

"""Finite-difference verification of recorded backward rules."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

__all__ = ["grad_check", "standard_checks"]


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    check: Sequence[bool] | None = None,
) -> float:
    """Compare analytic gradients of scalar `fn(*inputs)` to central differences.

    Inputs are promoted to float64; the return value is the worst relative
    error max|a-n| / max(1, |n|) over all checked inputs. Raises AssertionError
    when it exceeds `tol`. `check` can mask inputs that are not differentiable
    arguments (e.g. integer labels passed through).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    if check is None:
        check = [True] * len(arrays)
    leaves = [Tensor(a, requires_grad=c) for a, c in zip(arrays, check)]

    with Tape() as tape:
        out = fn(*leaves)
        if out.data.size != 1:
            raise ValueError("grad_check expects a scalar-valued function")
        tape.backward(out)

    worst = 0.0
    for leaf, a, c in zip(leaves, arrays, check):
        if not c:
            continue
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*[Tensor(x) for x in arrays]).data.reshape(())
            flat[i] = orig - eps
            lo = fn(*[Tensor(x) for x in arrays]).data.reshape(())
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        denom = max(1.0, float(np.abs(numeric).max()))
        err = float(np.abs(analytic - numeric).max()) / denom
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch on input {leaves.index(leaf)}: "
                f"relative error {err:.3e} > {tol:.1e}")
    return worst


def standard_checks() -> list[tuple[str, float]]:
    """Finite-difference errors for every backward rule the model relies on.

    Probe points are fixed-seed and chosen away from selection kinks
    (ReLU zero crossings, pooling ties, top-k boundaries). Returns
    (op name, worst relative error) pairs.
    """
    from . import tensor as T
    from .embedding import DescriptorSet
    from .measure import ClassPool, MeasureConfig, cosine_matrix, image_to_class

    gen = np.random.default_rng(1333)

    def sq_sum(fn):
        def wrapped(*ts):
            out = fn(*ts)
            return T.tensor_sum(T.multiply(out, out))
        return wrapped

    results: list[tuple[str, float]] = []

    x = gen.normal(size=(2, 2, 4, 4))
    w = gen.normal(size=(3, 2, 3, 3))
    b = gen.normal(size=(3,))
    results.append(("conv2d", grad_check(sq_sum(T.conv2d), [x, w, b])))

    xb = gen.normal(size=(3, 2, 4, 4)) * 2 + 0.5
    gamma = gen.uniform(0.5, 1.5, size=2)
    beta = gen.normal(size=2)
    results.append(("batchnorm2d", grad_check(sq_sum(T.batchnorm2d),
                                              [xb, gamma, beta])))

    xr = gen.normal(size=(4, 5))
    xr[np.abs(xr) < 0.05] += 0.1
    results.append(("leaky_relu",
                    grad_check(sq_sum(lambda t: T.leaky_relu(t, 0.2)), [xr])))

    results.append(("maxpool2d",
                    grad_check(sq_sum(T.maxpool2d), [gen.normal(size=(2, 2, 4, 6))])))

    xf = gen.normal(size=(4, 6))
    wf = gen.normal(size=(6, 3))
    bf = gen.normal(size=(3,))
    results.append(("fully_connected",
                    grad_check(sq_sum(T.fully_connected), [xf, wf, bf])))

    logits = gen.normal(size=(6, 4))
    labels = gen.integers(0, 4, size=6)
    results.append(("softmax_cross_entropy",
                    grad_check(lambda t: T.softmax_cross_entropy(t, labels),
                               [logits])))

    q = gen.normal(size=(4, 3))
    p = gen.normal(size=(4, 5))
    results.append(("cosine_matrix",
                    grad_check(sq_sum(cosine_matrix), [q, p])))

    mcfg = MeasureConfig(k_neighbors=2)
    while True:  # keep the top-k boundary margin comfortably wide
        qi = gen.normal(size=(4, 5))
        pool = gen.normal(size=(4, 8))
        qn = qi / np.linalg.norm(qi, axis=0)
        pn = pool / np.linalg.norm(pool, axis=0)
        sims = np.sort(qn.T @ pn, axis=1)
        if (sims[:, -2] - sims[:, -3]).min() > 1e-3:
            break
    results.append(("image_to_class", grad_check(
        lambda a, c: image_to_class(DescriptorSet(a, (1, 5)),
                                    ClassPool(0, c, [(0, 8)]), mcfg),
        [qi, pool])))
    return results

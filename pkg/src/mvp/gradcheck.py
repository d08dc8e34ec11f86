"""Central finite-difference checks of the autodiff engine.

Used by the ``gradcheck`` CLI subcommand and by the test-suite.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import init_mvp, mvp_forward, tiny_config


def check_function(
    build: Callable[[list[Tensor]], Tensor],
    inputs: list[np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences of ``sum(w * build(xs))``.

    A fixed random projection ``w`` turns any output into a scalar so every
    output element contributes.
    """
    rng = rng or np.random.default_rng(0)
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with ad.Tape() as tape:
        out = build(leaves)
        w = Tensor(rng.standard_normal(out.shape))
        loss = ad.sum_all(ad.mul(out, w))
    tape.backward(loss)

    def f() -> float:
        return float(np.sum(build(leaves).data * w.data))

    worst = 0.0
    for leaf in leaves:
        idx = list(np.ndindex(leaf.shape))
        if max_coords is not None and len(idx) > max_coords:
            idx = [idx[i] for i in rng.choice(len(idx), max_coords, replace=False)]
        for i in idx:
            num = ad.numerical_grad(f, leaf.data, i, eps)
            worst = max(worst, ad.rel_error(float(leaf.grad[i]), num, floor=1e-6))
    return worst


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Small random instances for every differentiable primitive."""
    r = rng.standard_normal
    mask_rng_seed = int(rng.integers(1 << 30))
    # values bounded away from 0 so ReLU's kink is never straddled
    away = np.where(r((3, 4)) > 0, 1.0, -1.0) * rng.uniform(0.2, 1.0, (3, 4))
    return {
        "add": (lambda t: ad.add(t[0], t[1]), [r((3, 4)), r((4,))]),
        "sub": (lambda t: ad.sub(t[0], t[1]), [r((2, 3, 4)), r((3, 1))]),
        "mul": (lambda t: ad.mul(t[0], t[1]), [r((3, 4)), r((1, 4))]),
        "scale": (lambda t: ad.scale(t[0], -2.5), [r((5,))]),
        "relu": (lambda t: ad.relu(t[0]), [away]),
        "sigmoid": (lambda t: ad.sigmoid(t[0]), [r((3, 4))]),
        "sum": (lambda t: ad.sum_all(t[0]), [r((3, 4))]),
        "mean": (lambda t: ad.mean(t[0], axis=-2), [r((2, 3, 4))]),
        "mean_all": (lambda t: ad.mean(t[0]), [r((3, 4))]),
        "reshape": (lambda t: ad.reshape(t[0], (4, 3)), [r((3, 4))]),
        "transpose": (lambda t: ad.transpose(t[0], (2, 0, 1)), [r((2, 3, 4))]),
        "take": (lambda t: ad.take(t[0], [2, 0, 0, 1], axis=1), [r((2, 3))]),
        "matmul": (lambda t: ad.matmul(t[0], t[1]), [r((2, 3, 4)), r((4, 5))]),
        "dense": (lambda t: ad.dense(t[0], t[1], t[2]), [r((2, 3, 4)), r((4, 5)), r((5,))]),
        "conv1d": (lambda t: ad.conv1d(t[0], t[1], t[2]), [r((2, 7, 2)), r((3, 2, 3)), r((3,))]),
        "softmax": (lambda t: ad.softmax_lastdim(t[0]), [r((2, 3, 5))]),
        "layer_norm": (lambda t: ad.layer_norm(t[0], t[1], t[2]), [r((3, 6)), r((6,)), r((6,))]),
        "bce": (lambda t: ad.bce_loss(t[0], (np.arange(8).reshape(4, 2) % 3 == 0).astype(float)), [r((4, 2))]),
        "dropout": (
            lambda t: ad.dropout(t[0], 0.3, np.random.default_rng(mask_rng_seed)),
            [r((4, 5))],
        ),
    }


def check_ops(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check_function(fn, xs, eps=eps, rng=rng) for name, (fn, xs) in op_cases(rng).items()}


def check_mvp(seed: int = 0, eps: float = 1e-5, n_coords: int = 20, batch: int = 2, mode: str = "fused") -> dict[str, float]:
    """Per-parameter max relative error for the tiny-config network under BCE loss."""
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    params = init_mvp(cfg, seed)
    # perturb zero-initialized biases/affines so every path is exercised
    params = {
        k: Tensor(p.data + 0.1 * rng.standard_normal(p.shape), requires_grad=True, name=k) for k, p in params.items()
    }
    video = rng.standard_normal((batch, cfg.video.input_time_max, cfg.video.input_channels))
    physio = rng.standard_normal((batch, cfg.physio.input_time_max, cfg.physio.input_channels))
    labels = (rng.random((batch, 2)) > 0.5).astype(float)
    with ad.Tape() as tape:
        loss = ad.bce_loss(mvp_forward(video, physio, params, cfg, mode=mode), labels)
    tape.backward(loss)

    def f() -> float:
        return ad.bce_loss(mvp_forward(video, physio, params, cfg, mode=mode), labels).item()

    errors = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        idx = list(np.ndindex(p.shape))
        if len(idx) > n_coords:
            idx = [idx[i] for i in rng.choice(len(idx), n_coords, replace=False)]
        errors[name] = max(ad.rel_error(float(p.grad[i]), ad.numerical_grad(f, p.data, i, eps), floor=1e-6) for i in idx)
    return errors

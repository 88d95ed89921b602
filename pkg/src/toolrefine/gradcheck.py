"""Central finite-difference check of the full bag-loss gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .milnet import NetworkConfig, RefinementModel, init_model
from .trainer import bag_loss, bag_step_gradients


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    num_checked: int
    num_failed: int
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.num_failed == 0


def check_gradients(
    model: RefinementModel,
    features: np.ndarray,
    label: np.ndarray,
    S: np.ndarray,
    alpha: float,
    step: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    clamp_eps: float = 1e-7,
) -> GradCheckResult:
    """Compare analytic gradients against central differences for every scalar parameter.

    An entry passes if its relative error is below ``rtol`` or its absolute
    error is below ``atol``.
    """
    model.zero_grad()
    bag_step_gradients(model, features, label, S, alpha, clamp_eps)
    analytic = {k: g.copy() for k, g in model.grads.items()}

    worst = ("", 0.0)
    max_abs = 0.0
    checked = failed = 0
    for name, param in model.params.items():
        flat = param.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = bag_loss(model, features, label, S, alpha, clamp_eps)
            flat[i] = orig - step
            down = bag_loss(model, features, label, S, alpha, clamp_eps)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            abs_err = abs(numeric - grad[i])
            rel_err = abs_err / max(abs(numeric), abs(grad[i]), 1e-300)
            checked += 1
            max_abs = max(max_abs, abs_err)
            if abs_err >= atol and rel_err >= rtol:
                failed += 1
            # relative error is only meaningful away from zero
            if max(abs(numeric), abs(grad[i])) >= atol and rel_err > worst[1]:
                worst = (f"{name}[{i}]", rel_err)
    return GradCheckResult(worst[1], max_abs, checked, failed, worst[0])


def random_problem(seed: int, max_D=8, max_d=16, max_L=2, max_N=5, max_C=4):
    """A random small network, bag, label, and co-occurrence matrix."""
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, max_d // heads + 1))
    C = int(rng.integers(2, max_C + 1))
    config = NetworkConfig(
        feature_dim=int(rng.integers(2, max_D + 1)),
        num_classes=C,
        model_dim=d,
        num_heads=heads,
        num_layers=int(rng.integers(1, max_L + 1)),
        mlp_hidden_dim=int(rng.integers(2, 9)),
        ff_hidden_dim=int(rng.integers(2, 17)),
        seed=int(rng.integers(2**31)),
    )
    model = init_model(config)
    # perturb layer-norm gains/biases so they are not at their symmetric init
    for name, p in model.params.items():
        if p.ndim == 1:
            p += rng.normal(0, 0.3, size=p.shape)
    N = int(rng.integers(1, max_N + 1))
    X = rng.normal(0, 1.0, size=(N, config.feature_dim))
    y = rng.integers(0, 2, size=C).astype(np.float64)
    A = rng.uniform(0, 1, size=(C, C))
    S = (A + A.T) / 2
    np.fill_diagonal(S, 0.0)
    alpha = float(rng.uniform(0.1, 1.0))
    return model, X, y, S, alpha

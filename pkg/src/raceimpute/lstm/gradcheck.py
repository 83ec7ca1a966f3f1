"""Finite-difference verification of the analytic gradients.

Central differences with a fixed dropout seed: the dropout masks depend only
on the seed and tensor shapes, so perturbing a parameter re-evaluates the
same deterministic function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidEpsilon
from .network import GEO_DIM, LstmGeoConfig, LstmGeoModel, init_model, loss_and_gradients


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_error < threshold


def micro_config(geo_enabled: bool = True, geo_mode: str = "concat", seed: int = 0) -> LstmGeoConfig:
    """A model small enough for exhaustive central differences."""
    return LstmGeoConfig(
        embed_dim=3,
        hidden_units=3,
        num_layers=2,
        dropout_rate=0.15,
        max_len=16,
        geo_enabled=geo_enabled,
        geo_mode=geo_mode,
        seed=seed,
    )


def _random_batch(config: LstmGeoConfig, rng: np.random.Generator):
    """Two sequences of different lengths so padding paths are exercised."""
    batch = []
    for length in (5, 9):
        tokens = rng.integers(3, 29, size=length).tolist()
        geo = None
        if config.geo_enabled:
            comp = rng.random(5)
            comp /= comp.sum()
            geo = np.concatenate([comp, [rng.random()]])
        label = int(rng.integers(0, 5))
        batch.append((tokens, geo, label))
    return batch


def grad_check(
    config: LstmGeoConfig | None = None,
    seed: int = 0,
    epsilon: float = 1e-4,
) -> GradCheckReport:
    """Compare every parameter's analytic gradient to central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator so
    near-zero gradients are judged on absolute agreement.
    """
    if epsilon <= 0 or not np.isfinite(epsilon):
        raise InvalidEpsilon(f"epsilon must be > 0, got {epsilon!r}")
    if config is None:
        config = micro_config(seed=seed)
    rng = np.random.default_rng(seed)
    model = init_model(config, rng)
    batch = _random_batch(config, rng)
    dropout_seed = int(rng.integers(0, 2**63))
    _, grads = loss_and_gradients(model, batch, dropout_seed=dropout_seed)
    return compare_to_finite_differences(model, batch, grads, dropout_seed, epsilon)


def compare_to_finite_differences(
    model: LstmGeoModel,
    batch,
    grads: dict[str, np.ndarray],
    dropout_seed: int,
    epsilon: float,
) -> GradCheckReport:
    if epsilon <= 0 or not np.isfinite(epsilon):
        raise InvalidEpsilon(f"epsilon must be > 0, got {epsilon!r}")
    per_param: dict[str, float] = {}
    for name, param in model.named_parameters():
        analytic = grads[name].reshape(-1)
        flat = param.reshape(-1)
        worst_here = 0.0
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + epsilon
            up, _ = loss_and_gradients(model, batch, dropout_seed=dropout_seed)
            flat[j] = old - epsilon
            down, _ = loss_and_gradients(model, batch, dropout_seed=dropout_seed)
            flat[j] = old
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(analytic[j] - numeric) / max(abs(analytic[j]), abs(numeric), 1e-6)
            worst_here = max(worst_here, rel)
        per_param[name] = worst_here
    max_err = max(per_param.values())
    worst_name = min(name for name, err in per_param.items() if err == max_err)
    return GradCheckReport(max_rel_error=max_err, worst_param=worst_name, per_param=per_param)

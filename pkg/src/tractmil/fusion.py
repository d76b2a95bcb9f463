"""Late fusion of the pooled image representation with median household income."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bags import TractBag
from .errors import DataError, ShapeError
from .milcore import GatedAttentionModel, predict_logit

__all__ = ["IncomeStats", "fit_income_stats", "attach_fusion", "fused_logit"]


@dataclass
class IncomeStats:
    """Training-set income normalization: mean and population std (USD/year)."""

    mean: float
    std: float


def fit_income_stats(bags: list[TractBag]) -> IncomeStats:
    """Mean and population standard deviation over training bags with known income.

    Stats must come from the training partition only so the normalization
    never leaks validation or test information.
    """
    incomes = np.array([b.income for b in bags if b.income is not None], dtype=np.float64)
    if incomes.size == 0:
        raise DataError("fusion unavailable: no training bag has a known income")
    if incomes.size < 2:
        raise DataError("fusion requires at least 2 training bags with known income")
    mean = float(incomes.mean())
    std = float(incomes.std())  # population std, ddof=0
    if std == 0.0:
        raise DataError("degenerate income column: all known incomes are equal")
    return IncomeStats(mean=mean, std=std)


def attach_fusion(model: GatedAttentionModel, stats: IncomeStats, w_inc: float = 0.0) -> None:
    """Install the fusion block in place; w_inc starts at 0 so fusion begins as a no-op."""
    model.w_inc = float(w_inc)
    model.income_mean = stats.mean
    model.income_std = stats.std
    model.validate()


def fused_logit(pooled: np.ndarray, income: float | None, model: GatedAttentionModel) -> float:
    """Image logit plus w_inc * z where z is the normalized income.

    Missing income imputes z = 0, the training mean in normalized space.
    """
    if not model.has_fusion:
        raise ShapeError("model has no fusion block; train with income or attach_fusion first")
    return predict_logit(pooled, model) + model.w_inc * model.income_z(income)

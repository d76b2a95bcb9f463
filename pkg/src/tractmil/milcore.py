"""Gated-attention bag model: forward pass, weighted loss, analytic gradients.

All math runs in float64. The model pools a bag's instance embeddings with
gated-attention weights, classifies the pooled vector with a single linear
layer, and optionally adds a normalized-income fusion term to the logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bags import TractBag
from .errors import NumericError, ShapeError

__all__ = [
    "GatedAttentionModel",
    "LossConfig",
    "GradientSet",
    "ForwardResult",
    "sigmoid",
    "attention_scores",
    "pool_bag",
    "predict_logit",
    "apply_dropout",
    "make_dropout_mask",
    "forward",
    "loss",
    "backward",
]


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    # max-subtraction is mandatory: scores may reach +-1e3 for wide gates.
    # The denominator sums in sorted order so permuting the instances
    # permutes the weights bitwise instead of perturbing the last ulp.
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / np.sort(e).sum()


@dataclass
class GatedAttentionModel:
    """All learnable parameters of the gated-attention tract classifier.

    ``V`` and ``U`` (both l x m) feed the tanh and sigmoid attention branches,
    ``w_attn`` projects the gated hidden vector to a scalar score, and
    ``w_clf``/``b`` form the linear classifier on the pooled embedding.
    The optional fusion block (``w_inc`` plus the training-set income
    normalization stats) is either fully present or fully absent.
    """

    m: int
    l: int
    V: np.ndarray
    U: np.ndarray
    w_attn: np.ndarray
    w_clf: np.ndarray
    b: float
    w_inc: float | None = None
    income_mean: float | None = None
    income_std: float | None = None

    def __post_init__(self):
        self.V = np.ascontiguousarray(self.V, dtype=np.float64)
        self.U = np.ascontiguousarray(self.U, dtype=np.float64)
        self.w_attn = np.ascontiguousarray(self.w_attn, dtype=np.float64)
        self.w_clf = np.ascontiguousarray(self.w_clf, dtype=np.float64)
        self.b = float(self.b)
        self.validate()

    def validate(self):
        if self.V.shape != (self.l, self.m):
            raise ShapeError(f"V must be {self.l}x{self.m}, got {self.V.shape}")
        if self.U.shape != (self.l, self.m):
            raise ShapeError(f"U must be {self.l}x{self.m}, got {self.U.shape}")
        if self.w_attn.shape != (self.l,):
            raise ShapeError(f"w_attn must have length {self.l}, got {self.w_attn.shape}")
        if self.w_clf.shape != (self.m,):
            raise ShapeError(f"w_clf must have length {self.m}, got {self.w_clf.shape}")
        for name in ("V", "U", "w_attn", "w_clf"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"non-finite entries in {name}")
        if not np.isfinite(self.b):
            raise NumericError("non-finite bias")
        fusion_fields = (self.w_inc, self.income_mean, self.income_std)
        present = [f is not None for f in fusion_fields]
        if any(present) and not all(present):
            raise ShapeError("fusion fields w_inc/income_mean/income_std must all be set or all be absent")
        if all(present):
            if not all(np.isfinite(f) for f in fusion_fields):
                raise NumericError("non-finite fusion parameters")
            if self.income_std <= 0:
                raise NumericError("income_std must be positive")

    @property
    def has_fusion(self) -> bool:
        return self.w_inc is not None

    def income_z(self, income: float | None) -> float:
        """Normalized income covariate; missing income imputes the training mean."""
        if not self.has_fusion:
            raise ShapeError("model has no fusion block")
        if income is None:
            return 0.0
        return (float(income) - self.income_mean) / self.income_std

    def copy(self) -> "GatedAttentionModel":
        return GatedAttentionModel(
            m=self.m,
            l=self.l,
            V=self.V.copy(),
            U=self.U.copy(),
            w_attn=self.w_attn.copy(),
            w_clf=self.w_clf.copy(),
            b=self.b,
            w_inc=self.w_inc,
            income_mean=self.income_mean,
            income_std=self.income_std,
        )

    @classmethod
    def zeros(cls, m: int, l: int) -> "GatedAttentionModel":
        return cls(
            m=m,
            l=l,
            V=np.zeros((l, m)),
            U=np.zeros((l, m)),
            w_attn=np.zeros(l),
            w_clf=np.zeros(m),
            b=0.0,
        )

    @classmethod
    def init_random(cls, m: int, l: int, rng: np.random.Generator) -> "GatedAttentionModel":
        """Small random initialization scaled by fan-in; bias starts at zero."""
        return cls(
            m=m,
            l=l,
            V=rng.normal(0.0, 1.0 / np.sqrt(m), size=(l, m)),
            U=rng.normal(0.0, 1.0 / np.sqrt(m), size=(l, m)),
            w_attn=rng.normal(0.0, 1.0 / np.sqrt(l), size=l),
            w_clf=rng.normal(0.0, 1.0 / np.sqrt(m), size=m),
            b=0.0,
        )


@dataclass
class LossConfig:
    """Weighted cross-entropy settings: positive-class weight, label smoothing, dropout."""

    pos_weight: float = 1.0
    label_smoothing: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not (self.pos_weight > 0 and np.isfinite(self.pos_weight)):
            raise NumericError("pos_weight must be a positive finite real")
        if not (0.0 <= self.label_smoothing < 0.5):
            raise NumericError("label_smoothing must lie in [0, 0.5)")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise NumericError("dropout_rate must lie in [0, 1)")

    def smoothed_target(self, label: int) -> float:
        """Two-sided smoothing: y*(1-eps) + eps/2."""
        eps = self.label_smoothing
        return float(label) * (1.0 - eps) + eps / 2.0


@dataclass
class GradientSet:
    """Partial derivatives of the loss with respect to every model parameter."""

    dV: np.ndarray
    dU: np.ndarray
    dw_attn: np.ndarray
    dw_clf: np.ndarray
    db: float
    dw_inc: float | None = None

    @classmethod
    def zeros_like(cls, model: GatedAttentionModel) -> "GradientSet":
        return cls(
            dV=np.zeros_like(model.V),
            dU=np.zeros_like(model.U),
            dw_attn=np.zeros_like(model.w_attn),
            dw_clf=np.zeros_like(model.w_clf),
            db=0.0,
            dw_inc=0.0 if model.has_fusion else None,
        )

    def add_(self, other: "GradientSet") -> None:
        self.dV += other.dV
        self.dU += other.dU
        self.dw_attn += other.dw_attn
        self.dw_clf += other.dw_clf
        self.db += other.db
        if self.dw_inc is not None:
            self.dw_inc += other.dw_inc

    def scale_(self, factor: float) -> None:
        self.dV *= factor
        self.dU *= factor
        self.dw_attn *= factor
        self.dw_clf *= factor
        self.db *= factor
        if self.dw_inc is not None:
            self.dw_inc *= factor

    def is_finite(self) -> bool:
        finite = (
            np.all(np.isfinite(self.dV))
            and np.all(np.isfinite(self.dU))
            and np.all(np.isfinite(self.dw_attn))
            and np.all(np.isfinite(self.dw_clf))
            and np.isfinite(self.db)
        )
        if self.dw_inc is not None:
            finite = finite and np.isfinite(self.dw_inc)
        return bool(finite)


@dataclass
class ForwardResult:
    logit: float
    attention: np.ndarray
    pooled: np.ndarray


def _check_instance_matrix(H: np.ndarray, m: int) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ShapeError(f"instance matrix must be K x M with K >= 1, got {H.shape}")
    if H.shape[1] != m:
        raise ShapeError(f"instance matrix has {H.shape[1]} columns, model expects {m}")
    if not np.all(np.isfinite(H)):
        raise NumericError("non-finite entries in instance matrix")
    return H


def _gate_scores(H: np.ndarray, model: GatedAttentionModel):
    """Tanh branch, sigmoid gate, and pre-softmax scores for each instance.

    Contractions go through einsum, whose per-row accumulation order does not
    depend on the row's position; BLAS matmul edge kernels would make the
    scores (and hence attention) drift in the last ulp under bag permutation.
    """
    tanh_branch = np.tanh(np.einsum("km,lm->kl", H, model.V))  # K x L
    sig_gate = sigmoid(np.einsum("km,lm->kl", H, model.U))  # K x L
    scores = np.einsum("kl,l->k", tanh_branch * sig_gate, model.w_attn)
    return tanh_branch, sig_gate, scores


def attention_scores(H: np.ndarray, model: GatedAttentionModel) -> np.ndarray:
    """Softmax attention weights from the tanh x sigmoid gate, one per instance."""
    H = _check_instance_matrix(H, model.m)
    _, _, scores = _gate_scores(H, model)
    return _softmax(scores)


def pool_bag(H: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Attention-weighted average of the instance embeddings."""
    H = np.asarray(H, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or H.ndim != 2 or a.shape[0] != H.shape[0]:
        raise ShapeError(f"weights {a.shape} do not match instance matrix {H.shape}")
    if abs(a.sum() - 1.0) > 1e-9:
        raise NumericError(f"attention weights sum to {a.sum()!r}, expected 1")
    return a @ H


def predict_logit(n: np.ndarray, model: GatedAttentionModel) -> float:
    """Linear classifier logit for a pooled embedding (image-only term)."""
    n = np.asarray(n, dtype=np.float64)
    if n.shape != (model.m,):
        raise ShapeError(f"pooled vector has shape {n.shape}, model expects ({model.m},)")
    if not np.all(np.isfinite(n)):
        raise NumericError("non-finite pooled vector")
    return float(model.w_clf @ n + model.b)


def make_dropout_mask(shape: tuple[int, int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli keep-flag matrix, one flag per instance-feature entry."""
    if not (0.0 <= rate < 1.0):
        raise NumericError("dropout rate must lie in [0, 1)")
    return (rng.random(shape) >= rate).astype(np.float64)


def apply_dropout(H: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    """Inverted dropout: zero masked entries, scale survivors by 1/(1-rate)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != H.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} does not match instances {H.shape}")
    if not (0.0 <= rate < 1.0):
        raise NumericError("dropout rate must lie in [0, 1)")
    return H * mask / (1.0 - rate)


def _effective_features(bag: TractBag, dropout_mask, dropout_rate: float) -> np.ndarray:
    H = bag.feature_matrix
    if dropout_mask is None:
        return H
    return apply_dropout(H, dropout_mask, dropout_rate)


def forward(
    bag: TractBag,
    model: GatedAttentionModel,
    dropout_mask: np.ndarray | None = None,
    dropout_rate: float = 0.0,
) -> ForwardResult:
    """Full bag forward pass: attention -> pooling -> linear logit.

    With a dropout mask the instance matrix is masked and rescaled before
    attention and pooling (training); without one it passes through unchanged
    (inference). Fusion models add w_inc * z(income) to the logit.
    """
    H = _effective_features(bag, dropout_mask, dropout_rate)
    a = attention_scores(H, model)
    n = pool_bag(H, a)
    logit = predict_logit(n, model)
    if model.has_fusion:
        logit += model.w_inc * model.income_z(bag.income)
    return ForwardResult(logit=logit, attention=a, pooled=n)


def loss(logit: float, label: int, cfg: LossConfig) -> float:
    """Weighted binary cross-entropy with two-sided label smoothing.

    Computed in log-sum-exp form (softplus), never materializing
    sigmoid-then-log, so it is stable for |logit| up to at least 1e4.
    """
    if label not in (0, 1):
        raise NumericError(f"label must be 0 or 1, got {label!r}")
    z = float(logit)
    yt = cfg.smoothed_target(label)
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    return float(cfg.pos_weight * yt * np.logaddexp(0.0, -z) + (1.0 - yt) * np.logaddexp(0.0, z))


def backward(
    bag: TractBag,
    label: int,
    model: GatedAttentionModel,
    cfg: LossConfig,
    dropout_mask: np.ndarray | None = None,
) -> tuple[float, GradientSet]:
    """Loss and exact analytic gradients for one bag.

    Differentiates the full composition including the attention softmax and
    the tanh/sigmoid gate. Weight decay is not included here; the optimizer
    applies it.
    """
    H = _effective_features(bag, dropout_mask, cfg.dropout_rate)
    H = _check_instance_matrix(H, model.m)

    T, S, scores = _gate_scores(H, model)
    G = T * S
    a = _softmax(scores)
    n = a @ H
    logit = float(model.w_clf @ n + model.b)
    z_inc = 0.0
    if model.has_fusion:
        z_inc = model.income_z(bag.income)
        logit += model.w_inc * z_inc

    yt = cfg.smoothed_target(label)
    value = float(
        cfg.pos_weight * yt * np.logaddexp(0.0, -logit) + (1.0 - yt) * np.logaddexp(0.0, logit)
    )

    p = sigmoid(logit)
    dlogit = cfg.pos_weight * yt * (p - 1.0) + (1.0 - yt) * p

    dw_clf = dlogit * n
    db = dlogit
    dn = dlogit * model.w_clf  # M

    da = H @ dn  # K
    dscores = a * (da - float(a @ da))  # softmax Jacobian applied to da
    dw_attn = G.T @ dscores
    dG = np.outer(dscores, model.w_attn)  # K x L
    dT = dG * S
    dS = dG * T
    dV_pre = dT * (1.0 - T * T)
    dU_pre = dS * S * (1.0 - S)
    dV = dV_pre.T @ H
    dU = dU_pre.T @ H

    grads = GradientSet(
        dV=dV,
        dU=dU,
        dw_attn=dw_attn,
        dw_clf=dw_clf,
        db=float(db),
        dw_inc=float(dlogit * z_inc) if model.has_fusion else None,
    )
    return value, grads

"""Training loop: class weighting, Adam with weight decay, early stopping,
validation-based model selection, and checkpoint serialization."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bags import TractBag
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .fusion import fit_income_stats, attach_fusion
from .geodata import SplitPlan
from .metrics import evaluate
from .milcore import (
    GatedAttentionModel,
    GradientSet,
    LossConfig,
    backward,
    make_dropout_mask,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochRecord",
    "TrainResult",
    "compute_pos_weight",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``pos_weight`` is either "auto" (negative/positive count ratio over the
    training partition) or an explicit positive real. ``l_dim`` sets the
    attention hidden width of the freshly initialized model.
    """

    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    dropout_rate: float = 0.9
    batch_size: int = 64
    label_smoothing: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    pos_weight: float | str = "auto"
    l_dim: int = 128
    use_income: bool = False
    freeze_attention: bool = False
    freeze_income_weight: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("rates must be non-negative")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not (0.0 <= self.label_smoothing < 0.5):
            raise ConfigError("label_smoothing must lie in [0, 0.5)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.l_dim < 1:
            raise ConfigError("l_dim must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.pos_weight != "auto":
            self.pos_weight = float(self.pos_weight)
            if self.pos_weight <= 0:
                raise ConfigError("explicit pos_weight must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter, plus step count."""

    m_V: np.ndarray
    v_V: np.ndarray
    m_U: np.ndarray
    v_U: np.ndarray
    m_w_attn: np.ndarray
    v_w_attn: np.ndarray
    m_w_clf: np.ndarray
    v_w_clf: np.ndarray
    m_b: float = 0.0
    v_b: float = 0.0
    m_w_inc: float = 0.0
    v_w_inc: float = 0.0
    t: int = 0

    @classmethod
    def zeros(cls, model: GatedAttentionModel) -> "AdamState":
        return cls(
            m_V=np.zeros_like(model.V),
            v_V=np.zeros_like(model.V),
            m_U=np.zeros_like(model.U),
            v_U=np.zeros_like(model.U),
            m_w_attn=np.zeros_like(model.w_attn),
            v_w_attn=np.zeros_like(model.w_attn),
            m_w_clf=np.zeros_like(model.w_clf),
            v_w_clf=np.zeros_like(model.w_clf),
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    val_macro_f1: float


@dataclass
class TrainResult:
    model: GatedAttentionModel
    history: list[EpochRecord]
    best_epoch: int


def compute_pos_weight(bags: list[TractBag]) -> float:
    """Ratio of negative to positive bag counts over the given (training) bags."""
    n_pos = sum(1 for b in bags if b.label == 1)
    n_neg = sum(1 for b in bags if b.label == 0)
    if n_pos == 0:
        raise DataError("training partition has no positive (food insecure) bags")
    if n_neg == 0:
        raise DataError("training partition has no negative (food secure) bags")
    return n_neg / n_pos


def _adam_update(theta, grad, m, v, t: int, lr: float):
    """One bias-corrected Adam update; returns (new_theta, new_m, new_v)."""
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return theta, m, v


def adam_step(
    model: GatedAttentionModel,
    grads: GradientSet,
    state: AdamState,
    cfg: TrainConfig,
) -> GatedAttentionModel:
    """Apply one in-place Adam step with coupled L2 weight decay.

    Decay is added to the gradient (decay * theta) before the moment update,
    for V, U, w_attn and w_clf only; the bias and the fusion weight are never
    decayed. Frozen parameter groups are skipped entirely.
    """
    if not grads.is_finite():
        raise NumericError("non-finite gradient; aborting optimizer step")
    state.t += 1
    t = state.t
    lr = cfg.learning_rate
    wd = cfg.weight_decay

    if not cfg.freeze_attention:
        model.V, state.m_V, state.v_V = _adam_update(
            model.V, grads.dV + wd * model.V, state.m_V, state.v_V, t, lr
        )
        model.U, state.m_U, state.v_U = _adam_update(
            model.U, grads.dU + wd * model.U, state.m_U, state.v_U, t, lr
        )
    model.w_attn, state.m_w_attn, state.v_w_attn = _adam_update(
        model.w_attn, grads.dw_attn + wd * model.w_attn, state.m_w_attn, state.v_w_attn, t, lr
    )
    model.w_clf, state.m_w_clf, state.v_w_clf = _adam_update(
        model.w_clf, grads.dw_clf + wd * model.w_clf, state.m_w_clf, state.v_w_clf, t, lr
    )
    model.b, state.m_b, state.v_b = _adam_update(
        model.b, grads.db, state.m_b, state.v_b, t, lr
    )
    model.b = float(model.b)
    if model.has_fusion and not cfg.freeze_income_weight:
        w_inc, state.m_w_inc, state.v_w_inc = _adam_update(
            model.w_inc, grads.dw_inc, state.m_w_inc, state.v_w_inc, t, lr
        )
        model.w_inc = float(w_inc)
    return model


def _batched(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def _bag_losses_and_grads(jobs, model, loss_cfg, threads: int):
    """Per-bag (loss, grads) in job order; bag-parallel when threads > 1."""

    def one(job):
        bag, mask = job
        try:
            return backward(bag, bag.label, model, loss_cfg, dropout_mask=mask)
        except NumericError as exc:
            raise NumericError(f"tract {bag.tract_id}: {exc}") from exc

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, jobs))
    return [one(job) for job in jobs]


def train(bags: list[TractBag], split: SplitPlan, cfg: TrainConfig) -> TrainResult:
    """Train a fresh model on the split's train partition, selecting the epoch
    with the best validation macro-F1 (ties go to the earliest epoch)."""
    labeled = {b.tract_id: b for b in bags if b.label is not None}
    for name in ("train", "validation"):
        missing = split.partition(name) - set(labeled)
        if missing:
            raise DataError(
                f"{name} partition names {len(missing)} tracts with no labeled bag, "
                f"e.g. {sorted(missing)[:3]}"
            )
    train_bags = [labeled[t] for t in sorted(split.train)]
    val_bags = [labeled[t] for t in sorted(split.validation)]
    if not train_bags or not val_bags:
        raise DataError("train and validation partitions must be nonempty")
    return run_training(train_bags, val_bags, cfg)


def run_training(
    train_bags: list[TractBag],
    val_bags: list[TractBag],
    cfg: TrainConfig,
) -> TrainResult:
    """Core loop shared by train() and the sklearn-style estimator."""
    dims = {b.dim for b in train_bags} | {b.dim for b in val_bags}
    if len(dims) != 1:
        raise DataError(f"bags have mixed embedding dimensions {sorted(dims)}")
    m = dims.pop()

    pos_weight = (
        compute_pos_weight(train_bags) if cfg.pos_weight == "auto" else float(cfg.pos_weight)
    )
    loss_cfg = LossConfig(
        pos_weight=pos_weight,
        label_smoothing=cfg.label_smoothing,
        dropout_rate=cfg.dropout_rate,
    )

    rng = np.random.default_rng(cfg.seed)
    model = GatedAttentionModel.init_random(m, cfg.l_dim, rng)
    if cfg.freeze_attention:
        model.V[:] = 0.0
        model.U[:] = 0.0
    if cfg.use_income:
        attach_fusion(model, fit_income_stats(train_bags), w_inc=0.0)
    state = AdamState.zeros(model)

    history: list[EpochRecord] = []
    best_f1 = -np.inf
    best_model = model.copy()
    best_epoch = 0
    epochs_without_improvement = 0

    order = np.arange(len(train_bags))
    for epoch in range(1, cfg.max_epochs + 1):
        rng.shuffle(order)
        epoch_losses: list[float] = []
        for batch in _batched(order, cfg.batch_size):
            jobs = []
            for idx in batch:
                bag = train_bags[idx]
                mask = (
                    make_dropout_mask(bag.feature_matrix.shape, cfg.dropout_rate, rng)
                    if cfg.dropout_rate > 0.0
                    else None
                )
                jobs.append((bag, mask))
            results = _bag_losses_and_grads(jobs, model, loss_cfg, cfg.threads)
            total = GradientSet.zeros_like(model)
            for (bag, _), (bag_loss, grads) in zip(jobs, results):
                if not np.isfinite(bag_loss):
                    raise NumericError(f"non-finite loss for tract {bag.tract_id}")
                if not grads.is_finite():
                    raise NumericError(f"non-finite gradient for tract {bag.tract_id}")
                total.add_(grads)  # summed in batch order for determinism
                epoch_losses.append(bag_loss)
            total.scale_(1.0 / len(jobs))  # batch loss is the mean over its bags
            adam_step(model, total, state, cfg)

        train_report = evaluate(model, train_bags)
        val_report = evaluate(model, val_bags)
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                train_accuracy=train_report.accuracy,
                val_accuracy=val_report.accuracy,
                val_macro_f1=val_report.f1_average,
            )
        )
        if val_report.f1_average > best_f1:
            best_f1 = val_report.f1_average
            best_model = model.copy()
            best_epoch = epoch
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                logger.info("early stop after epoch %d (no improvement for %d epochs)",
                            epoch, epochs_without_improvement)
                break

    return TrainResult(model=best_model, history=history, best_epoch=best_epoch)


def save_checkpoint(model: GatedAttentionModel, cfg: TrainConfig, path) -> None:
    """Write a self-describing JSON checkpoint with full float round-trip precision."""
    snapshot = asdict(cfg)
    snapshot.pop("threads")  # execution resource, not a model hyperparameter
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "m": model.m,
        "l": model.l,
        "V": model.V.tolist(),
        "U": model.U.tolist(),
        "w_attn": model.w_attn.tolist(),
        "w_clf": model.w_clf.tolist(),
        "b": model.b,
        "train_config": snapshot,
    }
    if model.has_fusion:
        doc["fusion"] = {
            "w_inc": model.w_inc,
            "income_mean": model.income_mean,
            "income_std": model.income_std,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _checkpoint_array(doc: dict, name: str, shape: tuple) -> np.ndarray:
    try:
        arr = np.asarray(doc[name], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint field {name!r} is missing or malformed") from exc
    if arr.shape != shape:
        raise CheckpointError(f"checkpoint field {name!r} has shape {arr.shape}, expected {shape}")
    return arr


def load_checkpoint(path) -> GatedAttentionModel:
    """Load a checkpoint; a missing fusion block yields an image-only model."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    try:
        m = int(doc["m"])
        l = int(doc["l"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError("checkpoint fields 'm'/'l' are missing or malformed") from exc
    kwargs = {}
    if "fusion" in doc:
        fusion = doc["fusion"]
        try:
            kwargs = {
                "w_inc": float(fusion["w_inc"]),
                "income_mean": float(fusion["income_mean"]),
                "income_std": float(fusion["income_std"]),
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError("checkpoint fusion block is malformed") from exc
    try:
        return GatedAttentionModel(
            m=m,
            l=l,
            V=_checkpoint_array(doc, "V", (l, m)),
            U=_checkpoint_array(doc, "U", (l, m)),
            w_attn=_checkpoint_array(doc, "w_attn", (l,)),
            w_clf=_checkpoint_array(doc, "w_clf", (m,)),
            b=float(doc["b"]),
            **kwargs,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint is malformed: {exc}") from exc

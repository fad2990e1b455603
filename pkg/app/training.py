"""Losses, the Adam optimizer, metric traces and the segmentation and fusion training loops."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt, field_validator
from sklearn.metrics import accuracy_score, recall_score

from app.cine_segmenter import FIBROSIS, CineSegmenter, CineVolume, SegmenterConfig, SegMask, mask_metrics, stack_cine_features
from app.errors import ConfigError, ShapeError
from app.fusion import HEADS, MODALITIES, AllocationStrategy, FusionPredictor, HeadOutputs, ModalityFeatures, PredictionBundle
from app.layers import Linear, Module
from app.numeric_encoder import NumericEncoder, NumericSchema, fit_schema, transform, undersample_indices
from app.risk_predictor import DEFAULT_THRESHOLDS, RISK_LEVELS, TimedFeatures, risk_level_codes
from app.synthetic_cohort import STAGES, Cohort, SyntheticPatient
from app.tensor import RngStream, Tensor, as_tensor, backward, no_grad, softmax
from app.text_encoder import TextEncoder, TextEncoderConfig, Vocab, build_vocab, patient_text, tokenize_batch

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12

# substream keys
_SPLIT, _UNDERSAMPLE, _INIT, _SHUFFLE, _SEGMENTER, _VALIDATION = 0, 1, 2, 3, 4, 5


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: PositiveInt = 500
    seg_epochs: Optional[PositiveInt] = None
    batch_size: PositiveInt = 32
    seg_batch_volumes: PositiveInt = 4
    eval_batch_size: PositiveInt = 128
    learning_rate: PositiveFloat = 1e-3
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: PositiveFloat = 1e-8
    weight_decay: NonNegativeFloat = 0.01
    seed: NonNegativeInt = 7
    loss_weights: Dict[str, NonNegativeFloat] = Field(default_factory=lambda: {head: 1.0 for head in HEADS})
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    # share of the training split held back to pick the restored epoch; 0 keeps the last epoch
    validation_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seg_test_size: PositiveInt = 36
    undersample: bool = True
    freeze_segmenter: bool = True
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    days_scale: PositiveFloat = 180.0
    risk_thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS

    @field_validator("loss_weights")
    @classmethod
    def _known_heads(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = set(value) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown loss weight heads {sorted(unknown)}")
        return {head: float(value.get(head, 1.0)) for head in HEADS}

    @property
    def segmentation_epochs(self) -> int:
        return self.seg_epochs or self.epochs


# losses


def cross_entropy(probabilities, targets) -> Tensor:
    """Mean -log p(target) over all rows; the class axis is last."""
    probabilities = as_tensor(probabilities)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    classes = probabilities.shape[-1]
    flat = probabilities.reshape(-1, classes)
    if flat.shape[0] != len(targets):
        raise ShapeError(f"{flat.shape[0]} predictions but {len(targets)} targets")
    picked = flat[np.arange(len(targets)), targets]
    if (picked.data < PROBABILITY_FLOOR).any():
        logger.warning(f"Clamping zero target probability to {PROBABILITY_FLOOR}")
        picked = picked.clip(PROBABILITY_FLOOR, None)
    return -(picked.log().mean())


def binary_cross_entropy(probabilities, targets) -> Tensor:
    probabilities = as_tensor(probabilities)
    targets = np.asarray(targets, dtype=np.float64)
    if probabilities.shape != targets.shape:
        raise ShapeError(f"prediction shape {probabilities.shape} differs from target shape {targets.shape}")
    picked = probabilities * targets + (1.0 - probabilities) * (1.0 - targets)
    if (picked.data < PROBABILITY_FLOOR).any():
        logger.warning(f"Clamping zero target probability to {PROBABILITY_FLOOR}")
        picked = picked.clip(PROBABILITY_FLOOR, None)
    return -(picked.log().mean())


def dice_loss(probabilities, labels, cls: int = FIBROSIS, smooth: float = 1e-6) -> Tensor:
    """1 - soft Dice between the class probability map and the class region."""
    probabilities = as_tensor(probabilities)
    labels = np.asarray(labels)
    if probabilities.shape[:-1] != labels.shape:
        raise ShapeError(f"probability maps {probabilities.shape} do not match mask {labels.shape}")
    p = probabilities[..., cls]
    g = (labels == cls).astype(np.float64)
    overlap = (p * g).sum()
    return 1.0 - (2.0 * overlap + smooth) / (p.sum() + float(g.sum()) + smooth)


def mse(predictions, targets) -> Tensor:
    predictions = as_tensor(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ShapeError(f"prediction shape {predictions.shape} differs from target shape {targets.shape}")
    diff = predictions - targets
    return (diff * diff).mean()


class Adam:
    """Adam with optional decoupled weight decay on matrix-shaped parameters."""

    def __init__(
        self,
        parameters: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if weight_decay < 0.0:
            raise ValueError(f"weight decay must be nonnegative, got {weight_decay}")
        self.parameters = list(parameters)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.parameters]
        self.v = [np.zeros_like(p.data) for p in self.parameters]

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.parameters):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad**2
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            # biases and norm gains stay undecayed
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = None


# metric traces

TRACE_COLUMNS = ("epoch", "train_loss", "test_loss", "acc_death", "acc_cause", "acc_macces", "acc_risk", "acc_integrated")
SEGMENTATION_COLUMNS = ("dsc", "hd", "hd95", "pixel_accuracy", "iou")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: Optional[float]
    test_loss: float
    acc_death: Optional[float] = None
    acc_cause: Optional[float] = None
    acc_macces: Optional[float] = None
    acc_risk: Optional[float] = None
    acc_integrated: Optional[float] = None
    dsc: Optional[float] = None
    hd: Optional[float] = None
    hd95: Optional[float] = None
    pixel_accuracy: Optional[float] = None
    iou: Optional[float] = None


@dataclass
class MetricTrace:
    kind: str
    records: List[EpochRecord] = field(default_factory=list)
    initial: Optional[EpochRecord] = None

    def append(self, record: EpochRecord) -> None:
        expected = len(self.records) + 1
        if record.epoch != expected:
            raise ValueError(f"expected epoch {expected}, got {record.epoch}")
        self.records.append(record)

    @property
    def final(self) -> EpochRecord:
        if not self.records:
            raise ValueError("trace has no completed epochs")
        return self.records[-1]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def columns(self) -> Tuple[str, ...]:
        return TRACE_COLUMNS + (SEGMENTATION_COLUMNS if self.kind == "segmentation" else ())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=list(self.columns))

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        logger.info(f"Metric trace written to {path}")
        return path


def split_indices(n: int, rng: RngStream, test_fraction: float = 0.2, test_size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint train/test index split, both sorted."""
    if n < 2:
        raise ConfigError(f"need at least two samples to split, got {n}")
    n_test = test_size if test_size is not None else int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    order = rng.permutation(n)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# segmentation


@dataclass
class SegmentationRun:
    segmenter: CineSegmenter
    trace: MetricTrace
    train_ids: List[str]
    test_ids: List[str]


def _volume_batch(patients: Sequence[SyntheticPatient]) -> Tuple[np.ndarray, np.ndarray]:
    frames = np.concatenate([p.cine.frames() for p in patients], axis=0)
    labels = np.concatenate([np.moveaxis(p.mask.labels, -1, 0) for p in patients], axis=0)
    return frames, labels


def segmentation_loss(segmenter: CineSegmenter, frames: np.ndarray, labels: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    logits, _ = segmenter.forward_frames(Tensor(frames))
    probabilities = softmax(logits, axis=-1)
    loss = cross_entropy(probabilities, labels) + dice_loss(probabilities, labels)
    return loss, probabilities.data


def evaluate_segmenter(segmenter: CineSegmenter, patients: Sequence[SyntheticPatient], epoch: int = 0, train_loss: Optional[float] = None) -> EpochRecord:
    segmenter.eval()
    losses, scores = [], []
    with no_grad():
        for patient in patients:
            frames, labels = _volume_batch([patient])
            loss, probabilities = segmentation_loss(segmenter, frames, labels)
            losses.append(loss.item())
            predicted = SegMask(np.moveaxis(probabilities.argmax(axis=-1), 0, -1))
            scores.append(mask_metrics(predicted, patient.mask, FIBROSIS))

    def average(key: str) -> Optional[float]:
        values = [s[key] for s in scores if s[key] is not None]
        return float(np.mean(values)) if values else None

    return EpochRecord(
        epoch=epoch,
        train_loss=train_loss,
        test_loss=float(np.mean(losses)),
        dsc=average("dsc"),
        hd=average("hd"),
        hd95=average("hd95"),
        pixel_accuracy=average("pixel_accuracy"),
        iou=average("iou"),
    )


def train_segmenter(cohort: Cohort, segmenter_config: SegmenterConfig, config: TrainConfig) -> SegmentationRun:
    """Cross-entropy plus fibrosis Dice loss on the cine subset, evaluated on a held-out split each epoch."""
    patients = cohort.cine_patients
    if len(patients) < 2:
        raise ConfigError("segmentation training needs at least two cine volumes")
    if tuple(cohort.spec.cine_shape) != segmenter_config.volume_shape:
        raise ConfigError(f"cohort cine shape {cohort.spec.cine_shape} does not match segmenter {segmenter_config.volume_shape}")

    rng = RngStream(config.seed, _SEGMENTER)
    train_idx, test_idx = split_indices(len(patients), rng.substream(_SPLIT), test_size=config.seg_test_size)
    train = [patients[i] for i in train_idx]
    test = [patients[i] for i in test_idx]
    segmenter = CineSegmenter(segmenter_config, rng.substream(_INIT))
    optimizer = Adam(segmenter.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    shuffle = rng.substream(_SHUFFLE)

    trace = MetricTrace("segmentation")
    trace.initial = evaluate_segmenter(segmenter, test)
    logger.info(f"Segmentation training: {len(train)} train / {len(test)} test volumes, initial DSC {trace.initial.dsc:.3f}")

    for epoch in range(1, config.segmentation_epochs + 1):
        segmenter.train()
        order = shuffle.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.seg_batch_volumes):
            chunk = [train[i] for i in order[start : start + config.seg_batch_volumes]]
            frames, labels = _volume_batch(chunk)
            loss, _ = segmentation_loss(segmenter, frames, labels)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            total += loss.item() * len(chunk)
        record = evaluate_segmenter(segmenter, test, epoch, total / len(train))
        trace.append(record)
        hd = f"{record.hd:.2f}" if record.hd is not None else "n/a"
        logger.info(f"[seg] epoch {epoch}: train {record.train_loss:.4f} test {record.test_loss:.4f} DSC {record.dsc:.3f} HD {hd}")

    return SegmentationRun(segmenter, trace, [p.patient_id for p in train], [p.patient_id for p in test])


# fusion


@dataclass
class FusionBatch:
    patient_ids: List[str]
    ids: np.ndarray
    mask: np.ndarray
    numeric: np.ndarray
    cine: np.ndarray
    volumes: List[Optional[CineVolume]]
    available: np.ndarray
    death: np.ndarray
    cause: np.ndarray
    days: np.ndarray
    macces: np.ndarray
    risk: np.ndarray

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, index) -> "FusionBatch":
        index = np.asarray(index, dtype=np.int64)
        values = {}
        for f in fields(self):
            value = getattr(self, f.name)
            values[f.name] = [value[i] for i in index] if isinstance(value, list) else value[index]
        return FusionBatch(**values)


def build_fusion_batch(
    patients: Sequence[SyntheticPatient],
    vocab: Vocab,
    schema: NumericSchema,
    max_len: int,
    modalities: Sequence[str],
    cine_features: Optional[Dict[str, np.ndarray]],
    cause_labels: Sequence[str],
    macces_labels: Sequence[str],
    feature_dim: int = 256,
) -> FusionBatch:
    ids, mask = tokenize_batch([p.text for p in patients], vocab, max_len)
    has_cine = np.array([("cine" in modalities) and p.has_cine for p in patients])
    available = np.column_stack(
        [
            np.full(len(patients), "text" in modalities),
            has_cine,
            np.full(len(patients), "numeric" in modalities),
        ]
    ).astype(np.int64)
    empty = np.flatnonzero(available.sum(axis=1) == 0)
    if len(empty):
        raise ConfigError(f"modality subset {tuple(modalities)} leaves patient {patients[empty[0]].patient_id} with no input")
    cine = np.zeros((len(patients), feature_dim))
    if cine_features is not None:
        for i, p in enumerate(patients):
            if has_cine[i]:
                cine[i] = cine_features[p.patient_id]
    return FusionBatch(
        patient_ids=[p.patient_id for p in patients],
        ids=ids,
        mask=mask,
        numeric=transform([p.numeric for p in patients], schema),
        cine=cine,
        volumes=[p.cine if has_cine[i] else None for i, p in enumerate(patients)],
        available=available,
        death=np.array([p.outcomes.death for p in patients], dtype=np.int64),
        cause=np.array([list(cause_labels).index(p.outcomes.cause) for p in patients], dtype=np.int64),
        days=np.array([p.outcomes.days for p in patients], dtype=np.float64),
        macces=np.array([list(macces_labels).index(p.outcomes.macces) for p in patients], dtype=np.int64),
        risk=np.array([RISK_LEVELS.index(p.outcomes.risk) for p in patients], dtype=np.int64),
    )


def cine_feature_table(segmenter: CineSegmenter, patients: Sequence[SyntheticPatient], batch_volumes: int = 8) -> Dict[str, np.ndarray]:
    """Frozen-segmenter cine features for every patient with a cine volume."""
    with_cine = [p for p in patients if p.has_cine]
    table = {}
    segmenter.eval()
    with no_grad():
        for start in range(0, len(with_cine), batch_volumes):
            chunk = with_cine[start : start + batch_volumes]
            features = segmenter.extract_cine_features([p.cine for p in chunk]).data
            for p, row in zip(chunk, features):
                table[p.patient_id] = row
    return table


class FusionModel(Module):
    """Text and numeric encoders, a cine adapter over segmenter features and the fusion predictor."""

    def __init__(
        self,
        n_numeric: int,
        vocab_size: int,
        text_config: TextEncoderConfig,
        rng: RngStream,
        cause_labels: Sequence[str],
        macces_labels: Sequence[str],
        days_scale: float = 180.0,
        dropout: float = 0.2,
        segmenter: Optional[CineSegmenter] = None,
    ):
        super().__init__()
        dim = text_config.feature_dim
        self.text_encoder = TextEncoder(text_config, vocab_size, rng.substream(1))
        self.numeric_encoder = NumericEncoder(n_numeric, rng.substream(2), out_features=dim, dropout=dropout)
        self.cine_adapter = Linear(dim, dim, rng.substream(3))
        self.predictor = FusionPredictor(rng.substream(4), dim, cause_labels, macces_labels, days_scale)
        # set only when the segmenter trains jointly; a frozen segmenter stays outside the parameter set
        self.segmenter = segmenter

    def encode(self, ids, mask, numeric, cine, volumes: Sequence[Optional[CineVolume]]) -> Tuple[Tensor, Tensor, Tensor]:
        text = self.text_encoder.project_text(self.text_encoder(ids, mask))
        numeric = self.numeric_encoder(Tensor(numeric))
        if self.segmenter is not None:
            raw = stack_cine_features(self.segmenter, volumes)
        else:
            raw = Tensor(cine)
        return text, self.cine_adapter(raw), numeric

    def forward(self, batch: FusionBatch, strategy: AllocationStrategy) -> Tuple[HeadOutputs, np.ndarray]:
        text, cine, numeric = self.encode(batch.ids, batch.mask, batch.numeric, batch.cine, batch.volumes)
        return self.predictor(text, cine, numeric, batch.available, strategy)


def fusion_loss(outputs: HeadOutputs, batch: FusionBatch, weights: Dict[str, float], days_scale: float) -> Tuple[Tensor, Dict[str, float]]:
    parts = {
        "death": binary_cross_entropy(outputs.death, batch.death.astype(np.float64)),
        "cause": cross_entropy(outputs.cause, batch.cause),
        "days": mse(outputs.days / days_scale, batch.days / days_scale),
        "macces": cross_entropy(outputs.macces, batch.macces),
    }
    total = None
    for head, loss in parts.items():
        term = loss * weights.get(head, 1.0)
        total = term if total is None else total + term
    return total, {head: loss.item() for head, loss in parts.items()}


@dataclass
class FusionEvaluation:
    loss: float
    accuracy: Dict[str, float]
    recall: Dict[int, float]
    predictions: List[PredictionBundle]
    allocations: np.ndarray
    death_probabilities: np.ndarray


def evaluate_fusion(
    model: FusionModel,
    batch: FusionBatch,
    strategy: AllocationStrategy,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    weights: Optional[Dict[str, float]] = None,
    chunk_size: int = 128,
) -> FusionEvaluation:
    """Per-head accuracies (percent), death-class recall and predictions on ``batch``."""
    weights = weights or {head: 1.0 for head in HEADS}
    model.eval()
    death, cause, macces, allocations, bundles = [], [], [], [], []
    total = 0.0
    with no_grad():
        for start in range(0, len(batch), chunk_size):
            chunk = batch.subset(np.arange(start, min(start + chunk_size, len(batch))))
            outputs, allocation = model(chunk, strategy)
            loss, _ = fusion_loss(outputs, chunk, weights, model.predictor.days_scale)
            total += loss.item() * len(chunk)
            death.append(outputs.death.data)
            cause.append(outputs.cause.data.argmax(axis=1))
            macces.append(outputs.macces.data.argmax(axis=1))
            allocations.append(allocation)
            bundles.extend(model.predictor.to_bundles(outputs, thresholds))
    death = np.concatenate(death)
    death_pred = (death > 0.5).astype(np.int64)
    risk_pred = risk_level_codes(death, thresholds)
    accuracy = {
        "death": 100.0 * accuracy_score(batch.death, death_pred),
        "cause": 100.0 * accuracy_score(batch.cause, np.concatenate(cause)),
        "macces": 100.0 * accuracy_score(batch.macces, np.concatenate(macces)),
        "risk": 100.0 * accuracy_score(batch.risk, risk_pred),
    }
    accuracy["integrated"] = (accuracy["death"] + accuracy["macces"] + accuracy["risk"]) / 3.0
    recall = recall_score(batch.death, death_pred, labels=[0, 1], average=None, zero_division=0)
    return FusionEvaluation(
        loss=total / len(batch),
        accuracy=accuracy,
        recall={0: 100.0 * float(recall[0]), 1: 100.0 * float(recall[1])},
        predictions=bundles,
        allocations=np.concatenate(allocations),
        death_probabilities=death,
    )


def majority_accuracy(batch: FusionBatch) -> Dict[str, float]:
    """Accuracy (percent) of always predicting each head's most frequent class in ``batch``."""
    accuracy = {
        head: 100.0 * np.bincount(labels).max() / len(labels)
        for head, labels in (("death", batch.death), ("cause", batch.cause), ("macces", batch.macces), ("risk", batch.risk))
    }
    accuracy["integrated"] = (accuracy["death"] + accuracy["macces"] + accuracy["risk"]) / 3.0
    return accuracy


def _record(epoch: int, train_loss: Optional[float], evaluation: FusionEvaluation) -> EpochRecord:
    acc = evaluation.accuracy
    return EpochRecord(
        epoch=epoch,
        train_loss=train_loss,
        test_loss=evaluation.loss,
        acc_death=acc["death"],
        acc_cause=acc["cause"],
        acc_macces=acc["macces"],
        acc_risk=acc["risk"],
        acc_integrated=acc["integrated"],
    )


@dataclass
class FusionContext:
    """Everything besides weights needed to rebuild inputs for a trained fusion model."""

    vocab: Vocab
    schema: NumericSchema
    strategy: AllocationStrategy
    modalities: Tuple[str, ...]
    text_config: TextEncoderConfig
    cause_labels: Tuple[str, ...]
    macces_labels: Tuple[str, ...]
    thresholds: Tuple[float, float]
    days_scale: float
    dropout: float
    train_ids: List[str]
    test_ids: List[str]
    joint_segmenter: bool = False
    seed: int = 0
    validation_ids: List[str] = field(default_factory=list)


@dataclass
class FusionRun:
    """A trained fusion model. ``best_epoch`` is the epoch whose weights the model carries."""

    model: FusionModel
    trace: MetricTrace
    context: FusionContext
    test_batch: FusionBatch
    best_epoch: int = 0

    @property
    def selected(self) -> EpochRecord:
        """Test-split record of the restored weights."""
        if self.best_epoch == 0:
            return self.trace.initial
        return self.trace.records[self.best_epoch - 1]


def train_fusion(
    cohort: Cohort,
    config: TrainConfig,
    text_config: TextEncoderConfig,
    strategy: AllocationStrategy,
    modalities: Sequence[str] = MODALITIES,
    segmenter: Optional[CineSegmenter] = None,
) -> FusionRun:
    """Multi-task training of the fusion model on a seeded split of the cohort."""
    requested = set(modalities)
    if not requested or requested - set(MODALITIES):
        raise ConfigError(f"modality subset must be a nonempty subset of {MODALITIES}, got {sorted(requested)}")
    modalities = tuple(m for m in MODALITIES if m in requested)
    if "cine" in modalities and segmenter is None:
        raise ConfigError("cine modality requested without a trained segmenter")

    rng = RngStream(config.seed)
    patients = cohort.patients
    train_idx, test_idx = split_indices(len(patients), rng.substream(_SPLIT), config.test_fraction)
    validation_patients = []
    if config.validation_fraction > 0.0 and len(train_idx) >= 4:
        fit, held = split_indices(len(train_idx), rng.substream(_VALIDATION), config.validation_fraction)
        train_idx, validation_idx = train_idx[fit], train_idx[held]
        validation_patients = [patients[i] for i in validation_idx]
    train_patients = [patients[i] for i in train_idx]
    test_patients = [patients[i] for i in test_idx]

    schema = fit_schema([p.numeric for p in train_patients], cohort.indicator_names)
    vocab = build_vocab([p.text for p in train_patients], text_config.max_vocab)
    joint = "cine" in modalities and not config.freeze_segmenter
    cine_features = cine_feature_table(segmenter, patients) if "cine" in modalities and not joint else None

    def batch_for(group: Sequence[SyntheticPatient]) -> FusionBatch:
        return build_fusion_batch(
            group, vocab, schema, text_config.max_len, modalities, cine_features,
            cohort.spec.cause_labels, cohort.spec.macces_labels, text_config.feature_dim,
        )

    train_batch, test_batch = batch_for(train_patients), batch_for(test_patients)
    validation_batch = batch_for(validation_patients) if validation_patients else None
    if config.undersample:
        keep = undersample_indices(train_batch.death, rng.substream(_UNDERSAMPLE))
        logger.info(f"Undersampled training split from {len(train_batch)} to {len(keep)} patients")
        train_batch = train_batch.subset(keep)

    model = FusionModel(
        schema.width, len(vocab), text_config, rng.substream(_INIT),
        cohort.spec.cause_labels, cohort.spec.macces_labels, config.days_scale, config.dropout,
        segmenter=segmenter if joint else None,
    )
    optimizer = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    shuffle = rng.substream(_SHUFFLE)

    def evaluate(batch: FusionBatch) -> FusionEvaluation:
        return evaluate_fusion(model, batch, strategy, config.risk_thresholds, config.loss_weights, config.eval_batch_size)

    trace = MetricTrace("fusion")
    trace.initial = _record(0, None, evaluate(test_batch))
    best_epoch, best_loss, best_state = 0, math.inf, None
    if validation_batch is not None:
        best_loss, best_state = evaluate(validation_batch).loss, model.state_dict()
    logger.info(
        f"Fusion training [{strategy.strategy_id}, {'+'.join(modalities)}]: "
        f"{len(train_batch)} train / {len(validation_patients)} validation / {len(test_batch)} test, "
        f"initial test loss {trace.initial.test_loss:.4f}"
    )

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = shuffle.permutation(len(train_batch))
        total = 0.0
        for start in range(0, len(train_batch), config.batch_size):
            chunk = train_batch.subset(order[start : start + config.batch_size])
            outputs, _ = model(chunk, strategy)
            loss, _ = fusion_loss(outputs, chunk, config.loss_weights, config.days_scale)
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
            total += loss.item() * len(chunk)
        record = _record(epoch, total / len(train_batch), evaluate(test_batch))
        trace.append(record)
        if validation_batch is None:
            best_epoch = epoch
        else:
            validation_loss = evaluate(validation_batch).loss
            if validation_loss < best_loss:
                best_epoch, best_loss, best_state = epoch, validation_loss, model.state_dict()
        logger.info(
            f"[fuse] epoch {epoch}: train {record.train_loss:.4f} test {record.test_loss:.4f} "
            f"acc death {record.acc_death:.1f} risk {record.acc_risk:.1f} integrated {record.acc_integrated:.1f}"
        )

    if best_state is not None and best_epoch != config.epochs:
        model.load_state_dict(best_state)
        model.eval()
        logger.info(f"Restored epoch {best_epoch} weights (validation loss {best_loss:.4f})")

    context = FusionContext(
        vocab=vocab,
        schema=schema,
        strategy=strategy,
        modalities=modalities,
        text_config=text_config,
        cause_labels=tuple(cohort.spec.cause_labels),
        macces_labels=tuple(cohort.spec.macces_labels),
        thresholds=tuple(config.risk_thresholds),
        days_scale=config.days_scale,
        dropout=config.dropout,
        train_ids=[p.patient_id for p in train_patients],
        test_ids=[p.patient_id for p in test_patients],
        joint_segmenter=joint,
        seed=config.seed,
        validation_ids=[p.patient_id for p in validation_patients],
    )
    return FusionRun(model, trace, context, test_batch, best_epoch)


def batch_for_patients(
    context: FusionContext, cohort: Cohort, patient_ids: Sequence[str], segmenter: Optional[CineSegmenter] = None
) -> FusionBatch:
    """Rebuild a fusion batch for stored patients with a trained model's vocabulary and schema."""
    patients = [cohort.patient(pid) for pid in patient_ids]
    cine_features = None
    if "cine" in context.modalities and not context.joint_segmenter:
        if segmenter is None:
            raise ConfigError("cine modality requires the trained segmenter")
        cine_features = cine_feature_table(segmenter, patients)
    return build_fusion_batch(
        patients, context.vocab, context.schema, context.text_config.max_len, context.modalities,
        cine_features, context.cause_labels, context.macces_labels, context.text_config.feature_dim,
    )


def patient_history(
    model: FusionModel, context: FusionContext, patient: SyntheticPatient, segmenter: Optional[CineSegmenter] = None
) -> List[TimedFeatures]:
    """Modality features at each treatment stage: prescriptions so far, baseline numeric and cine."""
    stage_days = dict(STAGES)
    prefixes = [patient.stages[: k + 1] for k in range(len(patient.stages))]
    ids, mask = tokenize_batch([patient_text(prefix) for prefix in prefixes], context.vocab, context.text_config.max_len)
    count = len(prefixes)
    numeric = np.repeat(transform([patient.numeric], context.schema), count, axis=0)
    has_cine = "cine" in context.modalities and patient.has_cine
    cine = np.zeros((count, context.text_config.feature_dim))
    if has_cine and not context.joint_segmenter:
        if segmenter is None:
            raise ConfigError("cine modality requires the trained segmenter")
        cine[:] = cine_feature_table(segmenter, [patient])[patient.patient_id]
    volumes = [patient.cine if has_cine else None] * count
    available = ("text" in context.modalities, has_cine, "numeric" in context.modalities)

    model.eval()
    with no_grad():
        text, cine_features, numeric_features = model.encode(ids, mask, numeric, cine, volumes)
    return [
        TimedFeatures(
            time=stage_days[label],
            features=ModalityFeatures(text.data[k], cine_features.data[k], numeric_features.data[k], available),
        )
        for k, (label, _) in enumerate(patient.stages)
    ]

"""Modality and allocation ablation runner and group-wise permutation importance."""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.cine_segmenter import CineSegmenter
from app.config import Preset
from app.errors import ConfigError
from app.fusion import MODALITIES, AllocationStrategy
from app.numeric_encoder import INDICATORS_BY_NAME
from app.tensor import RngStream
from app.training import FusionBatch, FusionRun, MetricTrace, evaluate_fusion, train_fusion, train_segmenter

logger = logging.getLogger(__name__)

MODALITY_ROWS: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    ("Textual + Cinematic + Numerical", ("text", "cine", "numeric")),
    ("Textual + Cinematic", ("text", "cine")),
    ("Textual + Numerical", ("text", "numeric")),
    ("Cinematic + Numerical", ("cine", "numeric")),
)

ALLOCATION_ROWS: Tuple[AllocationStrategy, ...] = (
    AllocationStrategy.self_reasoning(),
    AllocationStrategy.fixed(0.5, 0.25, 0.25),
    AllocationStrategy.fixed(0.25, 0.5, 0.25),
    AllocationStrategy.fixed(0.25, 0.25, 0.5),
)

# Published accuracies for the same rows, quoted next to each result for reference.
REFERENCE_ACCURACY = {
    "Textual + Cinematic + Numerical": 96.5,
    "Textual + Cinematic": 94.0,
    "Textual + Numerical": 92.5,
    "Cinematic + Numerical": 86.5,
    "Self-attention": 96.5,
    "Text 50% + Cine 25% + Num 25%": 91.7,
    "Text 25% + Cine 50% + Num 25%": 87.7,
    "Text 25% + Cine 25% + Num 50%": 84.8,
}

REFERENCE_IMPORTANCE = {"therapeutic agents": 0.376, "CMR": 0.327}


@dataclass
class AblationRow:
    section: str
    label: str
    accuracy: float
    reference: Optional[float]
    strategy: str
    modalities: Tuple[str, ...]

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} for '{self.label}' outside [0, 100]")


@dataclass
class AblationReport:
    rows: List[AblationRow]
    traces: Dict[str, MetricTrace] = field(default_factory=dict, repr=False)

    def row(self, label: str) -> AblationRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def section(self, name: str) -> List[AblationRow]:
        return [row for row in self.rows if row.section == name]

    def to_dict(self) -> Dict:
        return {
            "metric": "integrated accuracy (%)",
            "rows": [{**asdict(row), "modalities": list(row.modalities)} for row in self.rows],
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        logger.info(f"Ablation report written to {path}")
        return path


@dataclass(frozen=True)
class AblationCell:
    strategy: AllocationStrategy
    modalities: Tuple[str, ...]

    @property
    def key(self) -> str:
        return f"{self.strategy.strategy_id}/{'+'.join(self.modalities)}"


def ablation_cells() -> List[AblationCell]:
    """Unique training runs behind the report; the tri-modal row and the self-attention row share one."""
    cells = [AblationCell(AllocationStrategy.self_reasoning(), modalities) for _, modalities in MODALITY_ROWS]
    cells += [AblationCell(strategy, MODALITIES) for strategy in ALLOCATION_ROWS]
    unique: Dict[str, AblationCell] = {}
    for cell in cells:
        unique.setdefault(cell.key, cell)
    return list(unique.values())


def _run_cell(cohort, preset: Preset, cell: AblationCell, segmenter: Optional[CineSegmenter]) -> Tuple[str, float, MetricTrace]:
    run = train_fusion(cohort, preset.train, preset.text, cell.strategy, cell.modalities, segmenter if "cine" in cell.modalities else None)
    return cell.key, run.selected.acc_integrated, run.trace


def ablate(
    cohort,
    preset: Preset,
    workers: int = 1,
    segmenter: Optional[CineSegmenter] = None,
    out: Optional[Union[str, Path]] = None,
) -> AblationReport:
    """Train every modality combination and allocation strategy under one seed, split and epoch budget."""
    if segmenter is None:
        logger.info("Training the cine segmenter shared by every ablation cell")
        segmenter = train_segmenter(cohort, preset.segmenter, preset.train).segmenter

    cells = ablation_cells()
    results: Dict[str, Tuple[float, MetricTrace]] = {}
    if workers > 1:
        logger.info(f"Running {len(cells)} ablation cells on {workers} workers")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, cohort, preset, cell, segmenter) for cell in cells]
            for future in futures:
                key, accuracy, trace = future.result()
                results[key] = (accuracy, trace)
    else:
        for i, cell in enumerate(cells, start=1):
            logger.info(f"[{i}/{len(cells)}] ablation cell {cell.key}")
            key, accuracy, trace = _run_cell(cohort, preset, cell, segmenter)
            results[key] = (accuracy, trace)

    rows = []
    for label, modalities in MODALITY_ROWS:
        cell = AblationCell(AllocationStrategy.self_reasoning(), modalities)
        rows.append(AblationRow("modal combination", label, results[cell.key][0], REFERENCE_ACCURACY[label], cell.strategy.strategy_id, modalities))
    for strategy in ALLOCATION_ROWS:
        cell = AblationCell(strategy, MODALITIES)
        rows.append(AblationRow("allocation strategy", strategy.label, results[cell.key][0], REFERENCE_ACCURACY[strategy.label], strategy.strategy_id, MODALITIES))

    report = AblationReport(rows, {key: trace for key, (_, trace) in results.items()})
    if out is not None:
        out = Path(out)
        for key, (_, trace) in results.items():
            trace.to_csv(out / "ablation" / f"{key.replace('/', '__')}.csv")
    for row in rows:
        logger.info(f"{row.section:20s} {row.label:35s} {row.accuracy:6.2f}% (reference {row.reference}%)")
    return report


# permutation importance

TEXT_GROUP = "text"
CINE_GROUP = "cine"
_IMPORTANCE = 5


def numeric_member(name: str) -> str:
    return f"numeric:{name}"


def default_groups(indicators: Sequence[str]) -> Dict[str, Tuple[str, ...]]:
    """Therapeutic agents (text), CMR (cine) and the numeric indicators split by category."""
    groups: Dict[str, List[str]] = {
        "therapeutic agents": [TEXT_GROUP],
        "CMR": [CINE_GROUP],
        "numerical indicators": [],
        "medical indicator": [],
        "noise control": [],
    }
    for name in indicators:
        indicator = INDICATORS_BY_NAME.get(name)
        if indicator is None:
            groups["noise control"].append(numeric_member(name))
        elif indicator.group == "demographic":
            groups["numerical indicators"].append(numeric_member(name))
        else:
            groups["medical indicator"].append(numeric_member(name))
    return {group: tuple(members) for group, members in groups.items() if members}


def check_partition(groups: Mapping[str, Sequence[str]], indicators: Sequence[str]) -> None:
    inputs = {TEXT_GROUP, CINE_GROUP} | {numeric_member(name) for name in indicators}
    seen: Dict[str, str] = {}
    for group, members in groups.items():
        if not members:
            raise ConfigError(f"importance group '{group}' is empty")
        for member in members:
            if member not in inputs:
                raise ConfigError(f"importance group '{group}' names unknown input '{member}'")
            if member in seen:
                raise ConfigError(f"input '{member}' appears in both '{seen[member]}' and '{group}'")
            seen[member] = group
    missing = sorted(inputs - set(seen))
    if missing:
        raise ConfigError(f"importance groups do not cover {missing}")


def permute_group(batch: FusionBatch, members: Sequence[str], permutation: np.ndarray, indicators: Sequence[str]) -> FusionBatch:
    """Copy of ``batch`` with the inputs in ``members`` shuffled across patients; labels stay put."""
    ids, mask, numeric = batch.ids.copy(), batch.mask.copy(), batch.numeric.copy()
    cine, volumes, available = batch.cine.copy(), list(batch.volumes), batch.available.copy()
    for member in members:
        if member == TEXT_GROUP:
            ids, mask = ids[permutation], mask[permutation]
        elif member == CINE_GROUP:
            cine = cine[permutation]
            volumes = [volumes[i] for i in permutation]
            available[:, 1] = available[permutation, 1]
        else:
            column = list(indicators).index(member.split(":", 1)[1])
            numeric[:, column] = numeric[permutation, column]
    return FusionBatch(
        batch.patient_ids, ids, mask, numeric, cine, volumes, available,
        batch.death, batch.cause, batch.days, batch.macces, batch.risk,
    )


@dataclass
class ImportanceReport:
    baseline: float
    scores: Dict[str, float]
    drops: Dict[str, float]
    repeats: int
    reference: Dict[str, float] = field(default_factory=lambda: dict(REFERENCE_IMPORTANCE))

    def ranked(self) -> List[Tuple[str, float]]:
        return sorted(self.scores.items(), key=lambda item: item[1], reverse=True)

    def to_dict(self) -> Dict:
        return {
            "metric": "integrated accuracy drop, normalized over groups",
            "baseline_accuracy": self.baseline,
            "repeats": self.repeats,
            "importance": self.scores,
            "accuracy_drop": self.drops,
            "reference_values": self.reference,
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        logger.info(f"Importance report written to {path}")
        return path


def permutation_importance(
    run: FusionRun,
    batch: Optional[FusionBatch] = None,
    groups: Optional[Mapping[str, Sequence[str]]] = None,
    repeats: int = 5,
    rng: Optional[RngStream] = None,
) -> ImportanceReport:
    """Mean integrated-accuracy drop when each input group is shuffled across patients, normalized to sum 1."""
    if repeats < 1:
        raise ConfigError(f"repeats must be at least 1, got {repeats}")
    batch = batch if batch is not None else run.test_batch
    indicators = run.context.schema.indicators
    groups = dict(groups) if groups is not None else default_groups(indicators)
    check_partition(groups, indicators)
    rng = rng or RngStream(run.context.seed, _IMPORTANCE)

    def score(candidate: FusionBatch) -> float:
        return evaluate_fusion(run.model, candidate, run.context.strategy, run.context.thresholds).accuracy["integrated"]

    baseline = score(batch)
    drops = {}
    for g, (group, members) in enumerate(groups.items()):
        stream = rng.substream(g)
        shuffled = [score(permute_group(batch, members, stream.permutation(len(batch)), indicators)) for _ in range(repeats)]
        drops[group] = max(0.0, baseline - float(np.mean(shuffled)))
        logger.info(f"Permuting '{group}': accuracy {baseline:.1f} -> {np.mean(shuffled):.1f}")

    total = sum(drops.values())
    if total == 0.0:
        logger.warning("No group changes accuracy when permuted; reporting uniform importance")
        scores = {group: 1.0 / len(drops) for group in drops}
    else:
        scores = {group: drop / total for group, drop in drops.items()}
    return ImportanceReport(baseline, scores, drops, repeats)

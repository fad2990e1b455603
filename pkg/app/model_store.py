"""Trained weights as npz archives with JSON metadata."""

import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.cine_segmenter import CineSegmenter, SegmenterConfig
from app.errors import ShapeError, WeightsError
from app.fusion import AllocationStrategy
from app.numeric_encoder import NumericSchema
from app.tensor import RngStream
from app.text_encoder import TextEncoderConfig, Vocab
from app.training import FusionContext, FusionModel

logger = logging.getLogger(__name__)

FORMAT = "prtm-weights/1"
SEGMENTER = "segmenter"
FUSION = "fusion"


class ModelStore:
    """Weights as ``<kind>.npz`` plus ``<kind>.json`` metadata in one model directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def has(self, kind: str) -> bool:
        return (self.root / f"{kind}.npz").exists()

    def save_segmenter(self, segmenter: CineSegmenter, preset: Optional[str] = None) -> Path:
        metadata = {"config": segmenter.config.model_dump(mode="json"), "preset": preset}
        return self._write(SEGMENTER, segmenter.state_dict(), metadata)

    def load_segmenter(self) -> CineSegmenter:
        state, metadata = self._read(SEGMENTER)
        try:
            config = SegmenterConfig.model_validate(metadata["config"])
        except (KeyError, ValidationError) as e:
            raise WeightsError(f"{self.root / 'segmenter.json'}: invalid segmenter config ({e})") from e
        segmenter = CineSegmenter(config, RngStream(0))
        self._load_state(segmenter, state, SEGMENTER)
        return segmenter.eval()

    def save_fusion(self, model: FusionModel, context: FusionContext, preset: Optional[str] = None) -> Path:
        metadata = {
            "preset": preset,
            "strategy": context.strategy.model_dump(mode="json"),
            "modalities": list(context.modalities),
            "text_config": context.text_config.model_dump(mode="json"),
            "vocab": list(context.vocab.tokens),
            "schema": context.schema.to_dict(),
            "cause_labels": list(context.cause_labels),
            "macces_labels": list(context.macces_labels),
            "thresholds": list(context.thresholds),
            "days_scale": context.days_scale,
            "dropout": context.dropout,
            "train_ids": list(context.train_ids),
            "test_ids": list(context.test_ids),
            "validation_ids": list(context.validation_ids),
            "joint_segmenter": context.joint_segmenter,
            "segmenter_config": model.segmenter.config.model_dump(mode="json") if model.segmenter is not None else None,
            "seed": context.seed,
        }
        return self._write(FUSION, model.state_dict(), metadata)

    def load_fusion(self) -> Tuple[FusionModel, FusionContext]:
        state, metadata = self._read(FUSION)
        path = self.root / "fusion.json"
        try:
            text_config = TextEncoderConfig.model_validate(metadata["text_config"])
            context = FusionContext(
                vocab=Vocab(tuple(metadata["vocab"])),
                schema=NumericSchema.from_dict(metadata["schema"]),
                strategy=AllocationStrategy.model_validate(metadata["strategy"]),
                modalities=tuple(metadata["modalities"]),
                text_config=text_config,
                cause_labels=tuple(metadata["cause_labels"]),
                macces_labels=tuple(metadata["macces_labels"]),
                thresholds=tuple(metadata["thresholds"]),
                days_scale=float(metadata["days_scale"]),
                dropout=float(metadata["dropout"]),
                train_ids=list(metadata["train_ids"]),
                test_ids=list(metadata["test_ids"]),
                joint_segmenter=bool(metadata["joint_segmenter"]),
                seed=int(metadata["seed"]),
                validation_ids=list(metadata.get("validation_ids", [])),
            )
            segmenter = None
            if context.joint_segmenter:
                segmenter = CineSegmenter(SegmenterConfig.model_validate(metadata["segmenter_config"]), RngStream(0))
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise WeightsError(f"{path}: invalid fusion metadata ({e})") from e

        model = FusionModel(
            context.schema.width, len(context.vocab), text_config, RngStream(context.seed),
            context.cause_labels, context.macces_labels, context.days_scale, context.dropout, segmenter=segmenter,
        )
        self._load_state(model, state, FUSION)
        return model.eval(), context

    def _write(self, kind: str, state: Dict[str, np.ndarray], metadata: Dict) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        weights = self.root / f"{kind}.npz"
        with open(weights, "wb") as handle:
            np.savez(handle, **state)
        document = {"format": FORMAT, "kind": kind, "parameters": sorted(state), **metadata}
        (self.root / f"{kind}.json").write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
        logger.info(f"✅ Saved {kind} weights ({len(state)} tensors) to {weights}")
        return weights

    def _read(self, kind: str) -> Tuple[Dict[str, np.ndarray], Dict]:
        weights = self.root / f"{kind}.npz"
        meta = self.root / f"{kind}.json"
        for path in (weights, meta):
            if not path.exists():
                raise WeightsError(f"{kind} weights not found: {path}")
        try:
            metadata = json.loads(meta.read_text())
        except json.JSONDecodeError as e:
            raise WeightsError(f"{meta}: malformed JSON at line {e.lineno}: {e.msg}") from e
        if metadata.get("format") != FORMAT or metadata.get("kind") != kind:
            raise WeightsError(f"{meta}: not a {kind} weights file")
        try:
            with np.load(weights, allow_pickle=False) as archive:
                state = {name: archive[name] for name in archive.files}
        except (OSError, ValueError, zipfile.BadZipFile, EOFError) as e:
            raise WeightsError(f"{weights}: corrupt weights archive ({e})") from e
        if sorted(state) != metadata.get("parameters"):
            raise WeightsError(f"{weights}: tensors do not match {meta}")
        return state, metadata

    def _load_state(self, module, state: Dict[str, np.ndarray], kind: str) -> None:
        try:
            module.load_state_dict(state)
        except ShapeError as e:
            raise WeightsError(f"{self.root / f'{kind}.npz'}: {e}") from e
        logger.info(f"Loaded {kind} weights from {self.root}")

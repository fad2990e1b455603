"""Cohort directories on disk."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from pydantic import ValidationError

from app.cine_segmenter import read_cine, read_mask, write_cine, write_mask
from app.errors import CohortError
from app.numeric_encoder import NumericRecord
from app.synthetic_cohort import (
    STAGES,
    Cohort,
    CohortSpec,
    GroundTruthPlan,
    Outcomes,
    SyntheticPatient,
    cohort_indicators,
)

logger = logging.getLogger(__name__)

FORMAT = "prtm-cohort/1"
MANIFEST = "manifest.json"
NUMERIC_CSV = "numeric.csv"
TEXT_JSONL = "text.jsonl"
CINE_DIR = "cine"
MASK_DIR = "masks"
ID_COLUMN = "patient_id"


class CohortStore:
    """Reads and writes a cohort directory: manifest, numeric CSV, text JSONL and cine binaries"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def save(self, cohort: Cohort) -> Path:
        """Write every file of the cohort; identical cohorts give identical bytes"""
        self.root.mkdir(parents=True, exist_ok=True)
        names = list(cohort.indicator_names)

        manifest = {
            "format": FORMAT,
            "seed": cohort.spec.seed,
            "spec": cohort.spec.model_dump(mode="json"),
            "indicators": names,
            "label_sets": {
                "cause": list(cohort.spec.cause_labels),
                "macces": list(cohort.spec.macces_labels),
                "risk": ["low", "medium", "high"],
            },
            "stages": [[label, day] for label, day in STAGES],
            "patients": [
                {
                    "id": p.patient_id,
                    "has_cine": p.has_cine,
                    "outcomes": {
                        "death": p.outcomes.death,
                        "cause": p.outcomes.cause,
                        "days": p.outcomes.days,
                        "macces": p.outcomes.macces,
                        "risk": p.outcomes.risk,
                    },
                }
                for p in cohort.patients
            ],
            "plan": cohort.plan.to_dict(),
        }
        (self.root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

        rows = [[p.patient_id] + [p.numeric.values.get(name) for name in names] for p in cohort.patients]
        frame = pd.DataFrame(rows, columns=[ID_COLUMN] + names)
        frame.to_csv(self.root / NUMERIC_CSV, index=False, lineterminator="\n")

        with open(self.root / TEXT_JSONL, "w") as handle:
            for p in cohort.patients:
                handle.write(json.dumps({"patient_id": p.patient_id, "stages": [list(s) for s in p.stages]}, sort_keys=True) + "\n")

        for p in cohort.cine_patients:
            write_cine(self.root / CINE_DIR / f"{p.patient_id}.cfv", p.cine)
            write_mask(self.root / MASK_DIR / f"{p.patient_id}.cfm", p.mask)

        logger.info(f"✅ Saved cohort of {len(cohort)} patients to {self.root}")
        return self.root

    def load(self, expected_seed: Optional[int] = None) -> Cohort:
        manifest = self._read_manifest()
        try:
            spec = CohortSpec.model_validate(manifest["spec"])
        except ValidationError as e:
            raise CohortError(f"{self.root / MANIFEST}: invalid cohort spec: {e}") from e
        if manifest.get("seed") != spec.seed:
            raise CohortError(f"{self.root / MANIFEST}: seed {manifest.get('seed')} does not match spec seed {spec.seed}")
        if expected_seed is not None and spec.seed != expected_seed:
            raise CohortError(f"cohort at {self.root} was generated with seed {spec.seed}, expected {expected_seed}")

        indicators = cohort_indicators(spec)
        names = [ind.name for ind in indicators]
        if manifest.get("indicators") != names:
            raise CohortError(f"{self.root / MANIFEST}: indicator list does not match the cohort spec")

        numeric = self._read_numeric(names)
        texts = self._read_text()
        patients: List[SyntheticPatient] = []
        for entry in manifest["patients"]:
            pid = entry["id"]
            if pid not in numeric:
                raise CohortError(f"{self.root / NUMERIC_CSV}: no row for patient {pid}")
            if pid not in texts:
                raise CohortError(f"{self.root / TEXT_JSONL}: no record for patient {pid}")
            cine, mask = None, None
            if entry["has_cine"]:
                cine, mask = self._read_cine(pid)
            patients.append(
                SyntheticPatient(
                    patient_id=pid,
                    numeric=numeric[pid],
                    stages=texts[pid],
                    outcomes=Outcomes(**entry["outcomes"]),
                    cine=cine,
                    mask=mask,
                )
            )
        extra = set(numeric) - {p.patient_id for p in patients}
        if extra:
            raise CohortError(f"{self.root / NUMERIC_CSV}: patient {sorted(extra)[0]} is not in the manifest")

        plan = GroundTruthPlan.from_dict(manifest["plan"])
        logger.info(f"Loaded cohort of {len(patients)} patients from {self.root}")
        return Cohort(spec, indicators, patients, plan)

    def _read_manifest(self) -> Dict:
        path = self.root / MANIFEST
        if not path.exists():
            raise CohortError(f"cohort manifest not found at {path}")
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CohortError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
        if manifest.get("format") != FORMAT:
            raise CohortError(f"{path}: unsupported cohort format {manifest.get('format')!r}")
        for key in ("spec", "seed", "patients", "plan", "indicators"):
            if key not in manifest:
                raise CohortError(f"{path}: missing field '{key}'")
        return manifest

    def _read_numeric(self, names: List[str]) -> Dict[str, NumericRecord]:
        path = self.root / NUMERIC_CSV
        if not path.exists():
            raise CohortError(f"numeric table not found at {path}")
        try:
            frame = pd.read_csv(path, dtype={ID_COLUMN: str}, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
            raise CohortError(f"{path}: cannot parse numeric table: {e}") from e
        if list(frame.columns) != [ID_COLUMN] + names:
            raise CohortError(f"{path}: header does not match the manifest indicators")
        records = {}
        for row in frame.itertuples(index=False):
            pid = row[0]
            values = {name: (None if pd.isna(v) else float(v)) for name, v in zip(names, row[1:])}
            try:
                records[pid] = NumericRecord(pid, values)
            except ValueError as e:
                raise CohortError(f"{path}: {e}") from e
        return records

    def _read_text(self) -> Dict[str, tuple]:
        path = self.root / TEXT_JSONL
        if not path.exists():
            raise CohortError(f"text corpus not found at {path}")
        texts = {}
        with open(path) as handle:
            for number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    texts[record["patient_id"]] = tuple((str(label), str(sentence)) for label, sentence in record["stages"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise CohortError(f"{path}:{number}: malformed text record ({e})") from e
        return texts

    def _read_cine(self, pid: str):
        cine_path = self.root / CINE_DIR / f"{pid}.cfv"
        mask_path = self.root / MASK_DIR / f"{pid}.cfm"
        if not cine_path.exists():
            raise CohortError(f"missing cine file for patient {pid}: {cine_path}")
        if not mask_path.exists():
            raise CohortError(f"missing mask file for patient {pid}: {mask_path}")
        try:
            return read_cine(cine_path), read_mask(mask_path)
        except ValueError as e:
            raise CohortError(f"patient {pid}: {e}") from e


def save_cohort(cohort: Cohort, path: Union[str, Path]) -> Path:
    return CohortStore(path).save(cohort)


def load_cohort(path: Union[str, Path], expected_seed: Optional[int] = None) -> Cohort:
    return CohortStore(path).load(expected_seed)

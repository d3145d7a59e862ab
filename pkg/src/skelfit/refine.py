"""Batch pseudo-label refinement.

Dataset records carry detector keypoints plus, optionally, a network
estimate and/or an existing pseudo ground truth.  ``refine_batch`` re-fits
every record from the chosen initialization and keeps the result only when
its objective is strictly lower than that of the stored label (evaluated
under the same config), so per-record objectives never increase across
refinement rounds.  Records are processed independently; parallel execution
does not change results or output order.

Datasets are line-delimited JSON, one record per line (schema version 1,
see the README).
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body_model import ModelDefinition
from .camera import WeakPerspectiveCamera
from .losses import KeypointSet2D
from .skelify import FitConfig, FitInit, fit, total_objective

DATASET_VERSION = 1
INIT_POLICIES = ("regressor-estimate", "existing-pseudo-gt", "best-of-both")


class DatasetFormatError(ValueError):
    """A dataset file or record violates the schema."""


@dataclass
class ParamEstimate:
    """Pose/shape/camera triple attached to a record."""

    q: np.ndarray
    beta: np.ndarray
    camera: WeakPerspectiveCamera
    objective: float | None = None  # stored fit objective, when known

    def to_dict(self) -> dict:
        out = {
            "q": self.q.tolist(),
            "beta": self.beta.tolist(),
            "camera": self.camera.as_array().tolist(),
        }
        if self.objective is not None:
            out["objective"] = self.objective
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamEstimate":
        return cls(
            q=np.asarray(doc["q"], dtype=np.float64),
            beta=np.asarray(doc["beta"], dtype=np.float64),
            camera=WeakPerspectiveCamera.from_array(doc["camera"]),
            objective=doc.get("objective"),
        )


@dataclass
class DatasetRecord:
    example_id: str
    image_id: str = ""
    bbox: np.ndarray | None = None  # (4,) pixels, x/y/w/h
    keypoints2d: KeypointSet2D | None = None  # normalized to the box
    keypoints3d: np.ndarray | None = None
    pseudo_gt: ParamEstimate | None = None
    regressor_estimate: ParamEstimate | None = None
    provenance: str = "initial-conversion"

    def to_dict(self) -> dict:
        doc: dict = {"v": DATASET_VERSION, "example_id": self.example_id, "image_id": self.image_id}
        if self.bbox is not None:
            doc["bbox"] = np.asarray(self.bbox, dtype=np.float64).tolist()
        if self.keypoints2d is not None:
            doc["keypoints2d"] = {
                "points": self.keypoints2d.points.tolist(),
                "confidence": self.keypoints2d.confidence.tolist(),
            }
        if self.keypoints3d is not None:
            doc["keypoints3d"] = np.asarray(self.keypoints3d).tolist()
        if self.pseudo_gt is not None:
            doc["pseudo_gt"] = self.pseudo_gt.to_dict()
        if self.regressor_estimate is not None:
            doc["regressor_estimate"] = self.regressor_estimate.to_dict()
        doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetRecord":
        kp = None
        if doc.get("keypoints2d") is not None:
            kp = KeypointSet2D(
                points=doc["keypoints2d"]["points"],
                confidence=doc["keypoints2d"]["confidence"],
            )
            if np.any(np.abs(kp.points) > 1.5):
                raise DatasetFormatError(
                    "keypoints2d out of the normalized range [-1.5, 1.5]"
                )
        return cls(
            example_id=str(doc["example_id"]),
            image_id=str(doc.get("image_id", "")),
            bbox=None if doc.get("bbox") is None else np.asarray(doc["bbox"], dtype=np.float64),
            keypoints2d=kp,
            keypoints3d=(
                None
                if doc.get("keypoints3d") is None
                else np.asarray(doc["keypoints3d"], dtype=np.float64)
            ),
            pseudo_gt=(
                None if doc.get("pseudo_gt") is None else ParamEstimate.from_dict(doc["pseudo_gt"])
            ),
            regressor_estimate=(
                None
                if doc.get("regressor_estimate") is None
                else ParamEstimate.from_dict(doc["regressor_estimate"])
            ),
            provenance=doc.get("provenance", "initial-conversion"),
        )


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    """Read a line-delimited record file; errors name the offending line."""
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                records.append(DatasetRecord.from_dict(doc))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {i}: {exc}") from exc
    return records


def save_dataset(records, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True))
            fh.write("\n")


@dataclass
class RecordReport:
    example_id: str
    skipped: bool = False
    reason: str = ""
    objective_before: float | None = None  # None when no stored label existed
    objective_after: float | None = None
    accepted: bool = False

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "skipped": self.skipped,
            "reason": self.reason,
            "objective_before": self.objective_before,
            "objective_after": self.objective_after,
            "accepted": self.accepted,
        }


@dataclass
class RefinementReport:
    records: list[RecordReport]
    acceptance_rate: float

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "acceptance_rate": self.acceptance_rate,
        }


def _next_provenance(tag: str) -> str:
    m = re.fullmatch(r"refined-round-(\d+)", tag)
    return f"refined-round-{int(m.group(1)) + 1 if m else 1}"


def _choose_init(record: DatasetRecord, model, config, policy: str):
    """Pick the starting estimate for one record, or a skip reason."""
    reg, gt = record.regressor_estimate, record.pseudo_gt
    if policy == "regressor-estimate":
        if reg is None:
            return None, "missing regressor_estimate"
        return reg, ""
    if policy == "existing-pseudo-gt":
        if gt is None:
            return None, "missing pseudo_gt"
        return gt, ""
    # best-of-both
    if reg is None and gt is None:
        return None, "missing regressor_estimate and pseudo_gt"
    if reg is None or gt is None:
        return reg or gt, ""
    kp = record.keypoints2d
    f_reg, _ = total_objective(model, reg.q, reg.beta, reg.camera, kp, config)
    f_gt, _ = total_objective(model, gt.q, gt.beta, gt.camera, kp, config)
    return (reg, "") if f_reg <= f_gt else (gt, "")


def _refine_one(args):
    record, model, config, policy = args
    if record.keypoints2d is None:
        return record, RecordReport(example_id=record.example_id, skipped=True, reason="no keypoints")
    init, reason = _choose_init(record, model, config, policy)
    if init is None:
        return record, RecordReport(example_id=record.example_id, skipped=True, reason=reason)
    if init.q.shape != (model.pose_dim,):
        return record, RecordReport(
            example_id=record.example_id, skipped=True,
            reason=f"init pose length {init.q.shape[0]} != model pose_dim {model.pose_dim}",
        )
    result = fit(
        model,
        record.keypoints2d,
        FitInit(q=init.q, beta=init.beta, camera=init.camera),
        config,
    )
    before = None
    if record.pseudo_gt is not None:
        before, _ = total_objective(
            model,
            record.pseudo_gt.q,
            record.pseudo_gt.beta,
            record.pseudo_gt.camera,
            record.keypoints2d,
            config,
        )
    accepted = before is None or result.objective < before
    report = RecordReport(
        example_id=record.example_id,
        objective_before=before,
        objective_after=result.objective,
        accepted=accepted,
    )
    if accepted:
        new_label = ParamEstimate(
            q=result.q, beta=result.beta, camera=result.camera, objective=result.objective
        )
        record = DatasetRecord(
            example_id=record.example_id,
            image_id=record.image_id,
            bbox=record.bbox,
            keypoints2d=record.keypoints2d,
            keypoints3d=record.keypoints3d,
            pseudo_gt=new_label,
            regressor_estimate=record.regressor_estimate,
            provenance=_next_provenance(record.provenance),
        )
    return record, report


def refine_batch(
    records,
    model: ModelDefinition,
    config: FitConfig | None = None,
    init_policy: str = "best-of-both",
    jobs: int = 1,
) -> tuple[list[DatasetRecord], RefinementReport]:
    """Re-fit every record and keep strictly better labels.

    Records without keypoints, or without the estimate the policy requires,
    are passed through untouched and flagged in the report.  Output order
    always matches input order.
    """
    if init_policy not in INIT_POLICIES:
        raise ValueError(f"init_policy must be one of {INIT_POLICIES}, got {init_policy!r}")
    config = config or FitConfig()
    work = [(rec, model, config, init_policy) for rec in records]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_refine_one, work, chunksize=8))
    else:
        outcomes = [_refine_one(w) for w in work]
    new_records = [r for r, _ in outcomes]
    reports = [rep for _, rep in outcomes]
    attempted = [r for r in reports if not r.skipped]
    rate = float(np.mean([r.accepted for r in attempted])) if attempted else 0.0
    return new_records, RefinementReport(records=reports, acceptance_rate=rate)

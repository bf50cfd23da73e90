"""Evaluation metrics: per-class Dice, exact Hausdorff distance, aggregation,
and per-case improvement/degradation analysis against a baseline."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _binary(labels: np.ndarray, class_id: int) -> np.ndarray:
    return np.asarray(labels) == class_id


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Dice overlap 2|P∩G| / (|P|+|G|) for one class.

    Both masks empty for the class -> 1.0; exactly one empty -> 0.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = _binary(pred, class_id)
    g = _binary(gt, class_id)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    inter = int((p & g).sum())
    return 2.0 * inter / (np_ + ng)


def boundary_pixels(region: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of region pixels with at least one 4-neighbor outside.

    Pixels on the image border count as boundary (outside the image is background).
    """
    region = np.asarray(region, dtype=bool)
    interior = np.zeros_like(region)
    interior[1:-1, 1:-1] = (
        region[1:-1, 1:-1]
        & region[:-2, 1:-1] & region[2:, 1:-1]
        & region[1:-1, :-2] & region[1:-1, 2:]
    )
    return np.argwhere(region & ~interior)


def _directed_sq_max_min(src: np.ndarray, dst: np.ndarray) -> int:
    # max over src of min over dst of squared euclidean distance, exact integers
    diff = src[:, None, :].astype(np.int64) - dst[None, :, :].astype(np.int64)
    sq = (diff * diff).sum(axis=2)
    return int(sq.min(axis=1).max())


def hausdorff(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Symmetric Hausdorff distance between class boundaries, in pixels.

    Distances are exact: squared integer arithmetic throughout with a single
    final square root. Both regions empty -> 0.0; exactly one empty -> the
    image-diagonal penalty sqrt(H^2 + W^2).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = _binary(pred, class_id)
    g = _binary(gt, class_id)
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        h, w = pred.shape
        return float(np.sqrt(h * h + w * w))
    pb = boundary_pixels(p)
    gb = boundary_pixels(g)
    sq = max(_directed_sq_max_min(pb, gb), _directed_sq_max_min(gb, pb))
    return float(np.sqrt(sq))


@dataclass
class CaseResult:
    """Per-(patient, phase) foreground metrics. HD entries may be None (missing)
    when a class is absent from both prediction and ground truth everywhere."""

    patient_id: str
    phase: str
    per_class_dice: dict[int, float]
    per_class_hd: dict[int, float | None]
    mean_dice: float
    mean_hd: float | None

    @property
    def case_id(self) -> str:
        return f"{self.patient_id}/{self.phase}"

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "phase": self.phase,
            "per_class_dice": {str(k): v for k, v in self.per_class_dice.items()},
            "per_class_hd": {str(k): v for k, v in self.per_class_hd.items()},
            "mean_dice": self.mean_dice,
            "mean_hd": self.mean_hd,
        }

    @staticmethod
    def from_dict(d: dict) -> "CaseResult":
        return CaseResult(
            patient_id=d["patient_id"],
            phase=d["phase"],
            per_class_dice={int(k): v for k, v in d["per_class_dice"].items()},
            per_class_hd={int(k): v for k, v in d["per_class_hd"].items()},
            mean_dice=d["mean_dice"],
            mean_hd=d["mean_hd"],
        )


def make_case_result(patient_id: str, phase: str, per_class_dice: dict[int, float],
                     per_class_hd: dict[int, float | None]) -> CaseResult:
    dices = list(per_class_dice.values())
    hds = [v for v in per_class_hd.values() if v is not None]
    return CaseResult(
        patient_id=patient_id,
        phase=phase,
        per_class_dice=dict(per_class_dice),
        per_class_hd=dict(per_class_hd),
        mean_dice=float(np.mean(dices)),
        mean_hd=float(np.mean(hds)) if hds else None,
    )


def aggregate(cases: list[CaseResult]) -> dict:
    """Per-class means plus mean +/- population std of per-case means.

    Missing HD values are excluded from HD aggregation; the exclusion count
    is reported.
    """
    if not cases:
        raise ValueError("cannot aggregate an empty case list")
    class_ids = sorted(cases[0].per_class_dice)
    per_class_dice = {
        c: float(np.mean([cs.per_class_dice[c] for cs in cases])) for c in class_ids
    }
    per_class_hd = {}
    hd_missing = 0
    for c in class_ids:
        vals = []
        for cs in cases:
            v = cs.per_class_hd.get(c)
            if v is None:
                hd_missing += 1
            else:
                vals.append(v)
        per_class_hd[c] = float(np.mean(vals)) if vals else None

    dice_means = np.array([cs.mean_dice for cs in cases], dtype=np.float64)
    hd_means = np.array([cs.mean_hd for cs in cases if cs.mean_hd is not None],
                        dtype=np.float64)
    return {
        "num_cases": len(cases),
        "per_class_dice_mean": per_class_dice,
        "per_class_hd_mean": per_class_hd,
        "dice_mean": float(dice_means.mean()),
        "dice_std": float(dice_means.std()),
        "hd_mean": float(hd_means.mean()) if hd_means.size else None,
        "hd_std": float(hd_means.std()) if hd_means.size else None,
        "hd_missing_count": hd_missing,
    }


def case_analysis(jras_cases: list[CaseResult], baseline_cases: list[CaseResult],
                  top_n: int = 5) -> dict:
    """Per-case mean-Dice deltas of the retrieval-guided run over the baseline."""
    jras_by_id = {c.case_id: c for c in jras_cases}
    base_by_id = {c.case_id: c for c in baseline_cases}
    if set(jras_by_id) != set(base_by_id):
        raise ValueError("case sets differ between the two runs")
    deltas = [
        (cid, jras_by_id[cid].mean_dice - base_by_id[cid].mean_dice)
        for cid in sorted(jras_by_id)
    ]
    # deterministic: sort by delta descending, then case id
    deltas.sort(key=lambda t: (-t[1], t[0]))
    improved = sum(1 for _, d in deltas if d > 0)
    degraded = sum(1 for _, d in deltas if d < 0)
    unchanged = len(deltas) - improved - degraded
    return {
        "improved": improved,
        "degraded": degraded,
        "unchanged": unchanged,
        "deltas": deltas,
        "top_improved": deltas[:top_n],
        "top_degraded": deltas[::-1][:top_n],
    }


@dataclass
class EvalReport:
    """Full evaluation output: per-slice rows, per-case results, aggregates,
    and optionally the no-retrieval baseline plus per-case deltas."""

    cases: list[CaseResult]
    aggregate: dict
    slice_rows: list[dict] = field(default_factory=list)
    baseline_cases: list[CaseResult] | None = None
    baseline_aggregate: dict | None = None
    baseline_comparison: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        d = {
            "meta": self.meta,
            "aggregate": self.aggregate,
            "cases": [c.to_dict() for c in self.cases],
            "slice_rows": self.slice_rows,
        }
        if self.baseline_cases is not None:
            d["baseline_cases"] = [c.to_dict() for c in self.baseline_cases]
            d["baseline_aggregate"] = self.baseline_aggregate
        if self.baseline_comparison is not None:
            d["baseline_comparison"] = {
                k: v for k, v in self.baseline_comparison.items()
            }
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @staticmethod
    def from_json(path) -> "EvalReport":
        def _intkeys(agg):
            if agg:
                for key in ("per_class_dice_mean", "per_class_hd_mean"):
                    if key in agg:
                        agg[key] = {int(k): v for k, v in agg[key].items()}
            return agg

        d = json.loads(Path(path).read_text())
        report = EvalReport(
            cases=[CaseResult.from_dict(c) for c in d["cases"]],
            aggregate=_intkeys(d["aggregate"]),
            slice_rows=d.get("slice_rows", []),
            meta=d.get("meta", {}),
        )
        if "baseline_cases" in d:
            report.baseline_cases = [CaseResult.from_dict(c) for c in d["baseline_cases"]]
            report.baseline_aggregate = _intkeys(d.get("baseline_aggregate"))
        if "baseline_comparison" in d:
            bc = d["baseline_comparison"]
            bc["deltas"] = [tuple(t) for t in bc.get("deltas", [])]
            bc["top_improved"] = [tuple(t) for t in bc.get("top_improved", [])]
            bc["top_degraded"] = [tuple(t) for t in bc.get("top_degraded", [])]
            report.baseline_comparison = bc
        return report

    def write_case_csv(self, path) -> None:
        class_ids = sorted(self.cases[0].per_class_dice) if self.cases else []
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            header = ["patient_id", "phase"]
            header += [f"dice_{c}" for c in class_ids]
            header += [f"hd_{c}" for c in class_ids]
            header += ["mean_dice", "mean_hd"]
            writer.writerow(header)
            for cs in self.cases:
                row = [cs.patient_id, cs.phase]
                row += [repr(cs.per_class_dice[c]) for c in class_ids]
                row += ["" if cs.per_class_hd[c] is None else repr(cs.per_class_hd[c])
                        for c in class_ids]
                row.append(repr(cs.mean_dice))
                row.append("" if cs.mean_hd is None else repr(cs.mean_hd))
                writer.writerow(row)

    def write_slice_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["patient_id", "phase", "slice_index", "class_id", "dice", "hd"])
            for r in self.slice_rows:
                writer.writerow([
                    r["patient_id"], r["phase"], r["slice_index"], r["class_id"],
                    repr(r["dice"]), repr(r["hd"]),
                ])


def write_delta_csv(comparison: dict, path) -> None:
    """Per-case Dice deltas sorted by delta (descending), then case id."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case_id", "dice_delta"])
        for cid, delta in comparison["deltas"]:
            writer.writerow([cid, f"{delta:+.4f}"])

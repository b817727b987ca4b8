"""Binary codes, Hamming matching, rank-1 identification and EER verification."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EXTRACTORS = ("F_S", "F_F")
GALLERIES = ("source", "fake")


def binarize(u) -> np.ndarray:
    """Bit ``k`` is 1 when ``u_k >= 0`` (ties go to 1)."""
    return (np.asarray(u, dtype=np.float64) >= 0).astype(np.uint8)


def hamming(a, b) -> int:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"hamming: length mismatch {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def hamming_matrix(probes, gallery) -> np.ndarray:
    """All pairwise Hamming distances between two bit matrices (P, K) and (G, K)."""
    p = np.asarray(probes, dtype=np.int64)
    g = np.asarray(gallery, dtype=np.int64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[1] != g.shape[1]:
        raise ValueError(f"code matrices incompatible: {p.shape} vs {g.shape}")
    # for 0/1 entries, a != b equals a + b - 2ab
    return p.sum(1)[:, None] + g.sum(1)[None, :] - 2 * (p @ g.T)


def identify(probe_bits, probe_labels, gallery_bits, gallery_labels) -> float:
    """Rank-1 accuracy; ties resolve to the lowest gallery index."""
    if len(gallery_bits) == 0:
        raise ValueError("identify: gallery is empty")
    d = hamming_matrix(probe_bits, gallery_bits)
    nearest = np.argmin(d, axis=1)
    g_labels = np.asarray(gallery_labels)
    return float(np.mean(g_labels[nearest] == np.asarray(probe_labels)))


@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray


def verification_scores(probe_bits, probe_labels, gallery_bits, gallery_labels) -> ScoreSet:
    """Score every probe/gallery pair; same label is genuine, otherwise imposter."""
    if len(gallery_bits) == 0:
        raise ValueError("verification_scores: gallery is empty")
    d = hamming_matrix(probe_bits, gallery_bits)
    pl, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    same = pl[:, None] == gl[None, :]
    for lab in np.unique(pl):
        if not np.any(gl == lab):
            log.warning("label %s has no gallery items; it contributes no genuine scores", lab)
    return ScoreSet(genuine=d[same].astype(np.float64), imposter=d[~same].astype(np.float64))


def compute_eer(scores: ScoreSet) -> tuple[float, list[tuple[float, float, float]]]:
    """EER and ROC points ``(threshold, FAR, FRR)``.

    Thresholds are the sorted distinct distances; a pair is accepted when its
    distance is <= the threshold. The EER is read at the crossing of FAR and
    FRR, interpolating linearly between the two thresholds that bracket it.
    The sweep starts from the point (FAR 0, FRR 1) of a threshold below every
    distance, so a crossing before the first observed threshold is
    interpolated the same way.
    """
    gen = np.sort(np.asarray(scores.genuine, dtype=np.float64))
    imp = np.sort(np.asarray(scores.imposter, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValueError("compute_eer needs non-empty genuine and imposter lists")
    thr = np.unique(np.concatenate([gen, imp]))
    far = np.searchsorted(imp, thr, side="right") / imp.size
    frr = 1.0 - np.searchsorted(gen, thr, side="right") / gen.size
    roc = [(float(t), float(a), float(r)) for t, a, r in zip(thr, far, frr)]

    far = np.concatenate([[0.0], far])
    frr = np.concatenate([[1.0], frr])
    # the last threshold accepts everything (FAR 1, FRR 0), so a crossing exists
    k = int(np.argmax(far >= frr))
    if far[k] == frr[k]:
        return float(far[k]), roc
    d0, d1 = far[k - 1] - frr[k - 1], far[k] - frr[k]
    w = -d0 / (d1 - d0)
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    return float(eer), roc


def rank_variants(codes: dict, labels: dict) -> list[dict]:
    """Accuracy and EER for every (extractor, gallery) pairing, in a fixed order.

    ``codes[extractor][split]`` holds real-valued codes for the ``target``,
    ``source`` and ``fake`` splits; ``labels[split]`` the matching labels.
    """
    rows = []
    for ext in EXTRACTORS:
        if ext not in codes:
            continue
        probe = binarize(codes[ext]["target"])
        for gal in GALLERIES:
            if gal not in codes[ext]:
                continue
            gallery = binarize(codes[ext][gal])
            acc = identify(probe, labels["target"], gallery, labels[gal])
            eer, roc = compute_eer(verification_scores(probe, labels["target"], gallery, labels[gal]))
            rows.append({"extractor": ext, "gallery": gal, "accuracy": acc, "eer": eer, "roc": roc})
    return rows


@dataclass
class EvalReport:
    accuracy: float
    eer: float
    roc: list = field(default_factory=list)
    accuracy_variant: str = ""
    eer_variant: str = ""
    variants: list = field(default_factory=list)

    def to_json(self, include_roc: bool = False) -> dict:
        d = asdict(self)
        if not include_roc:
            d.pop("roc")
        return d


def best_of_variants(codes: dict, labels: dict) -> EvalReport:
    """Best accuracy and lowest EER over all pairings; ties keep the first in fixed order."""
    rows = rank_variants(codes, labels)
    if not rows:
        raise ValueError("no (extractor, gallery) variants to evaluate")
    best_acc = max(rows, key=lambda r: r["accuracy"])  # max/min return the first on ties
    best_eer = min(rows, key=lambda r: r["eer"])
    tag = lambda r: f"{r['extractor']}/{r['gallery']}"  # noqa: E731
    return EvalReport(
        accuracy=best_acc["accuracy"],
        eer=best_eer["eer"],
        roc=best_eer["roc"],
        accuracy_variant=tag(best_acc),
        eer_variant=tag(best_eer),
        variants=[{"variant": tag(r), "accuracy": r["accuracy"], "eer": r["eer"]} for r in rows],
    )


def write_report(report: EvalReport, path, extra: dict | None = None) -> None:
    payload = report.to_json()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_roc_csv(roc, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "FAR", "FRR"])
        for t, a, r in roc:
            w.writerow([repr(t), repr(a), repr(r)])

"""Cosine gallery/probe scoring and verification/identification metrics.

A probe is accepted at threshold ``t`` when its score is ``>= t``. The ROC
is traced over every distinct score plus the +inf/-inf sentinels, so it
starts at (0, 0) and ends at (1, 1). AUC is the trapezoid area, EER the
linearly interpolated FAR == FRR crossing, TAR@x the interpolated TAR at
FAR == x (the upper end of any vertical segment sitting exactly on x).
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # [num_probes, num_gallery]
    probe_ids: list[str]
    gallery_ids: list[str]
    probe_keys: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.probe_ids = [str(x) for x in self.probe_ids]
        self.gallery_ids = [str(x) for x in self.gallery_ids]
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError(f"score matrix {self.scores.shape} does not match "
                             f"{len(self.probe_ids)} probe / {len(self.gallery_ids)} gallery ids")

    def genuine_mask(self) -> np.ndarray:
        return np.asarray(self.probe_ids)[:, None] == np.asarray(self.gallery_ids)[None, :]


@dataclass
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray


@dataclass
class VerificationReport:
    auc: float
    eer: float
    tar_at_1pct_far: float
    tar_at_5pct_far: float
    num_genuine: int = 0
    num_impostor: int = 0

    def as_row(self) -> tuple[float, float, float, float]:
        return self.auc, self.eer, self.tar_at_1pct_far, self.tar_at_5pct_far


@dataclass
class IdentificationReport:
    rank: dict[int, float]
    topk: dict[int, list[str]] = field(default_factory=dict)
    excluded: int = 0


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray, ids: Sequence[str], role: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{role} embeddings must be a non-empty [n, d] array")
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"{role} item {bad[0]} (id {ids[bad[0]]!r}) has a zero embedding")
    return x / norms[:, None]


def build_score_matrix(probe_embeddings, probe_ids, gallery_embeddings, gallery_ids,
                       probe_keys=None) -> ScoreMatrix:
    """All-pairs cosine similarity, rows = probes, columns = gallery."""
    p = _unit_rows(probe_embeddings, list(probe_ids), "probe")
    g = _unit_rows(gallery_embeddings, list(gallery_ids), "gallery")
    if p.shape[1] != g.shape[1]:
        raise ValueError(f"embedding sizes differ: probe {p.shape[1]} vs gallery {g.shape[1]}")
    return ScoreMatrix(np.clip(p @ g.T, -1.0, 1.0), list(probe_ids), list(gallery_ids),
                       None if probe_keys is None else list(probe_keys))


def fuse_gallery(matrix: ScoreMatrix) -> ScoreMatrix:
    """Max-fuse columns that share a subject id (first-appearance order)."""
    order = list(dict.fromkeys(matrix.gallery_ids))
    if len(order) == len(matrix.gallery_ids):
        return matrix
    ids = np.asarray(matrix.gallery_ids)
    fused = np.stack([matrix.scores[:, ids == s].max(axis=1) for s in order], axis=1)
    return ScoreMatrix(fused, matrix.probe_ids, order, matrix.probe_keys)


def split_scores(matrix: ScoreMatrix) -> tuple[np.ndarray, np.ndarray]:
    mask = matrix.genuine_mask()
    return matrix.scores[mask], matrix.scores[~mask]


def roc_curve(genuine, impostor) -> RocCurve:
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("ROC needs at least one genuine and one impostor score")
    distinct = np.unique(np.concatenate([genuine, impostor]))[::-1]
    thresholds = np.concatenate([[np.inf], distinct, [-np.inf]])
    g_sorted = np.sort(genuine)
    i_sorted = np.sort(impostor)
    # count of scores >= t
    tar = (g_sorted.size - np.searchsorted(g_sorted, thresholds, side="left")) / g_sorted.size
    far = (i_sorted.size - np.searchsorted(i_sorted, thresholds, side="left")) / i_sorted.size
    return RocCurve(far, tar, thresholds)


def _interp_eer(far: np.ndarray, tar: np.ndarray) -> float:
    diff = far - (1.0 - tar)  # non-decreasing along the sweep, -1 -> +1
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def _interp_tar(far: np.ndarray, tar: np.ndarray, target: float) -> float:
    k = int(np.searchsorted(far, target, side="right")) - 1  # last point with far <= target
    if far[k] == target or k == far.size - 1:
        return float(tar[k])
    f0, f1 = far[k], far[k + 1]
    return float(tar[k] + (target - f0) / (f1 - f0) * (tar[k + 1] - tar[k]))


def verification_from_scores(genuine, impostor) -> VerificationReport:
    roc = roc_curve(genuine, impostor)
    auc = float(np.sum(np.diff(roc.far) * (roc.tar[1:] + roc.tar[:-1]) / 2.0))
    return VerificationReport(
        auc=auc,
        eer=_interp_eer(roc.far, roc.tar),
        tar_at_1pct_far=_interp_tar(roc.far, roc.tar, 0.01),
        tar_at_5pct_far=_interp_tar(roc.far, roc.tar, 0.05),
        num_genuine=int(np.size(genuine)),
        num_impostor=int(np.size(impostor)),
    )


def verification_report(matrix: ScoreMatrix, fuse: bool = True) -> VerificationReport:
    """AUC, EER and TAR@1%/5% FAR over all probe/gallery pairs.

    Gallery columns of the same subject are max-fused first unless
    ``fuse=False``.
    """
    m = fuse_gallery(matrix) if fuse else matrix
    genuine, impostor = split_scores(m)
    if genuine.size == 0:
        raise ValueError("no genuine (same-id) probe/gallery pairs")
    if impostor.size == 0:
        raise ValueError("no impostor (different-id) probe/gallery pairs")
    return verification_from_scores(genuine, impostor)


def ranked_gallery(scores_row: np.ndarray) -> np.ndarray:
    """Column order by descending score, ties by ascending gallery index."""
    return np.lexsort((np.arange(scores_row.size), -scores_row))


def identification_report(matrix: ScoreMatrix, k_list: Sequence[int] = (1, 5),
                          fuse: bool = True) -> IdentificationReport:
    m = fuse_gallery(matrix) if fuse else matrix
    gallery_set = set(m.gallery_ids)
    kmax = max(k_list)
    hits = {k: 0 for k in k_list}
    topk: dict[int, list[str]] = {}
    counted = excluded = 0
    gids = np.asarray(m.gallery_ids)
    for i, pid in enumerate(m.probe_ids):
        order = ranked_gallery(m.scores[i])
        ranked_ids = list(dict.fromkeys(str(g) for g in gids[order]))
        topk[i] = ranked_ids[:kmax]
        if pid not in gallery_set:
            excluded += 1
            continue
        counted += 1
        pos = ranked_ids.index(pid)
        for k in k_list:
            hits[k] += pos < k
    rank = {k: (hits[k] / counted if counted else float("nan")) for k in k_list}
    return IdentificationReport(rank=rank, topk=topk, excluded=excluded)


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------

SUMMARY_FIELDS = ("auc", "eer", "tar_at_1pct_far", "tar_at_5pct_far")


def export_report(report: VerificationReport, matrix: ScoreMatrix, path: str | os.PathLike,
                  identification: IdentificationReport | None = None,
                  prefix: str = "") -> dict[str, Path]:
    """Write score matrix, ROC points and metric summary as CSV files.

    Files: ``<prefix>scores.csv`` (header ``probe_id,<gallery ids>``),
    ``<prefix>roc.csv`` (``far,tar,threshold``), ``<prefix>summary.csv``
    (``metric,value`` rows in the order auc, eer, tar_at_1pct_far,
    tar_at_5pct_far) and, when given, ``<prefix>topk.csv``.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    files = {}
    files["scores"] = out / f"{prefix}scores.csv"
    with open(files["scores"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_id", *matrix.gallery_ids])
        for pid, row in zip(matrix.probe_ids, matrix.scores):
            w.writerow([pid, *(repr(float(v)) for v in row)])
    fused = fuse_gallery(matrix)
    roc = roc_curve(*split_scores(fused))
    files["roc"] = out / f"{prefix}roc.csv"
    with open(files["roc"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["far", "tar", "threshold"])
        for f, t, th in zip(roc.far, roc.tar, roc.thresholds):
            w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])
    files["summary"] = out / f"{prefix}summary.csv"
    with open(files["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        values = asdict(report)
        for key in SUMMARY_FIELDS:
            w.writerow([key, repr(float(values[key]))])
    if identification is not None:
        files["topk"] = out / f"{prefix}topk.csv"
        with open(files["topk"], "w", newline="") as fh:
            w = csv.writer(fh)
            k = max(len(v) for v in identification.topk.values()) if identification.topk else 0
            w.writerow(["probe_index", "probe_key", "probe_id", *(f"rank{j + 1}" for j in range(k))])
            keys = matrix.probe_keys or [""] * len(matrix.probe_ids)
            for i, ranked in identification.topk.items():
                w.writerow([i, keys[i], matrix.probe_ids[i], *ranked])
    return files


def read_score_matrix(path: str | os.PathLike) -> ScoreMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "probe_id":
        raise ValueError(f"{path}: not a score-matrix file")
    scores = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    return ScoreMatrix(scores.reshape(len(body), len(header) - 1), [r[0] for r in body],
                       header[1:])


def read_summary(path: str | os.PathLike) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {k: float(v) for k, v in rows[1:]}

"""Train-and-evaluate glue: protocol embedding, scoring and ablation sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dpif.data import ManifestEntry, build_protocol, standard_protocols
from dpif.head import ACTIVATION_COMBOS, DpifModel, count_trainable
from dpif.metrics import (IdentificationReport, ScoreMatrix, VerificationReport,
                          build_score_matrix, identification_report, verification_report)
from dpif.tensor import Tensor, no_grad
from dpif.trainer import FeatureCache, TrainConfig, Trainer, build_model

logger = logging.getLogger(__name__)

ABLATIONS = ("embedding_size", "lambda_sweep", "activation_combo", "truncation_depth")
ABLATION_FIELDS = ("setting", "auc", "eer", "tar_at_1pct_far", "tar_at_5pct_far", "params")
DEFAULT_GALLERY = "G_VB0-"
DEFAULT_PROBE = "P_TP"


@dataclass
class Evaluation:
    matrix: ScoreMatrix
    verification: VerificationReport
    identification: IdentificationReport


def embed_entries(model: DpifModel, entries: Sequence[ManifestEntry], features: FeatureCache,
                  chunk: int = 256) -> np.ndarray:
    """Embeddings through the stream matching each entry's spectrum."""
    if not entries:
        return np.zeros((0, model.head.config.embedding_size))
    out = np.zeros((len(entries), model.head.config.embedding_size), dtype=np.float64)
    with no_grad():
        for spectrum, fn in (("visible", model.head.embed_visible_features),
                             ("thermal", model.head.embed_thermal_features)):
            idx = [i for i, e in enumerate(entries) if e.spectrum == spectrum]
            for start in range(0, len(idx), chunk):
                sel = idx[start:start + chunk]
                feats = features([entries[i] for i in sel])
                out[sel] = fn(Tensor(feats)).data
    return out


def score_protocol(model: DpifModel, gallery: Sequence[ManifestEntry],
                   probes: Sequence[ManifestEntry], features: FeatureCache) -> ScoreMatrix:
    if not gallery or not probes:
        raise ValueError("gallery and probe sets must be non-empty")
    g = embed_entries(model, gallery, features)
    p = embed_entries(model, probes, features)
    return build_score_matrix(p, [e.subject_id for e in probes], g,
                              [e.subject_id for e in gallery],
                              probe_keys=[e.path for e in probes])


def evaluate(model: DpifModel, test_manifest: Sequence[ManifestEntry], root=None,
             gallery: str = DEFAULT_GALLERY, probe: str = DEFAULT_PROBE,
             features: FeatureCache | None = None, normalize: bool = False,
             resize: bool = False, k_list=(1, 5)) -> Evaluation:
    """Score one probe set against one gallery set of the test manifest."""
    specs = [s for s in standard_protocols(None, None) if s.role != "train"]
    splits = build_protocol(test_manifest, specs)
    for name in (gallery, probe):
        if name not in splits:
            raise KeyError(f"unknown protocol set {name!r}")
        if not splits[name]:
            raise ValueError(f"protocol set {name} is empty for this manifest")
    if not {e.subject_id for e in splits[probe]} & {e.subject_id for e in splits[gallery]}:
        raise ValueError(f"probe set {probe} shares no subjects with gallery {gallery}")
    features = features or FeatureCache(model, root, normalize, resize)
    matrix = score_protocol(model, splits[gallery], splits[probe], features)
    return Evaluation(matrix, verification_report(matrix), identification_report(matrix, k_list))


def train_and_evaluate(config: TrainConfig, train_manifest: Sequence[ManifestEntry],
                       test_manifest: Sequence[ManifestEntry], root=None,
                       gallery: str = DEFAULT_GALLERY, probe: str = DEFAULT_PROBE,
                       backbone_weights=None) -> tuple[Trainer, Evaluation]:
    train_ids = {e.subject_id for e in train_manifest}
    test_ids = {e.subject_id for e in test_manifest}
    if train_ids & test_ids:
        raise ValueError("train and test manifests share subjects: "
                         + ", ".join(sorted(train_ids & test_ids)))
    classes = sorted({e.subject_id for e in train_manifest
                      if e.spectrum == "visible" and e.pose_class == "frontal"})
    model = build_model(config, len(classes), backbone_weights)
    trainer = Trainer(model, config, train_manifest, root, classes)
    trainer.run()
    evaluation = evaluate(model, test_manifest, root, gallery, probe,
                          features=trainer.features)
    return trainer, evaluation


def ablation_configs(kind: str, grid: Sequence, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Expand one ablation axis into (setting label, config) pairs."""
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {', '.join(ABLATIONS)}")
    grid = list(grid)
    if not grid:
        if kind == "activation_combo":
            grid = ["-".join(c) for c in ACTIVATION_COMBOS]
        else:
            raise ValueError(f"ablation {kind} needs a non-empty grid")
    out = []
    for value in grid:
        if kind == "embedding_size":
            cfg = base.replace(embedding_size=int(value))
        elif kind == "lambda_sweep":
            cfg = base.replace(lam=float(value))
        elif kind == "activation_combo":
            acts = tuple(value.split("-")) if isinstance(value, str) else tuple(value)
            cfg = base.replace(activations=acts)
            value = "-".join(acts)
        else:
            cfg = base.replace(truncation=str(value))
        out.append((str(value), cfg))
    return out


def run_ablation(kind: str, grid: Sequence, base: TrainConfig,
                 train_manifest: Sequence[ManifestEntry], test_manifest: Sequence[ManifestEntry],
                 root=None, gallery: str = DEFAULT_GALLERY, probe: str = DEFAULT_PROBE
                 ) -> list[dict]:
    """One row per setting: verification metrics and trainable-parameter count."""
    rows = []
    for label, cfg in ablation_configs(kind, grid, base):
        logger.info("ablation %s = %s", kind, label)
        trainer, ev = train_and_evaluate(cfg, train_manifest, test_manifest, root, gallery, probe)
        v = ev.verification
        rows.append({"setting": label, "auc": v.auc, "eer": v.eer,
                     "tar_at_1pct_far": v.tar_at_1pct_far, "tar_at_5pct_far": v.tar_at_5pct_far,
                     "params": count_trainable(trainer.model)})
    return rows

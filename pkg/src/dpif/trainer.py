"""Two-phase training with deterministic seeding and resumable checkpoints.

Phase 1 fits the shared layers and the visible identity classifier on
frontal visible images. Phase 2 freezes the classifier and trains the
thermal stream (plus the shared layers) under the joint loss on
(off-pose thermal, frontal visible) pairs of the same subject.

The backbone is frozen, so its features are computed once per image and
cached; this is exactly equivalent to running it every step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from dpif import ops
from dpif.backbone import BackboneSpec, build_backbone
from dpif.data import ManifestEntry, load_image
from dpif.head import CLASSIFIER, SHARED, THERMAL_ONLY, DpifModel, DpitHead, HeadConfig
from dpif.losses import LossConfig, cross_spectrum_loss, joint_loss, pose_correction_loss
from dpif.optim import OptimizerConfig, OptimizerState, optimizer_step
from dpif.tensor import Tensor, backward, no_grad, zero_grad
from dpif.weights import WeightStore, load_weight_store, save_weight_store

logger = logging.getLogger(__name__)

# settings chosen locally rather than taken from the reference recipe
LOCAL_DEFAULTS = ("batch_size", "optimizer", "lr", "beta1", "beta2", "eps", "seed",
                      "backbone_seed", "head_seed", "dtype", "detach_visible",
                      "normalize_inputs", "resize_inputs", "f_width")


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 5
    phase2_epochs: int = 100
    lam: float = 1e-5
    embedding_size: int = 256
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    activations: tuple[str, str] = ("tanh", "relu")
    family: str = "resnet50"
    truncation: str = "block_4e"
    groups: int = 2
    f_width: int = 200
    detach_visible: bool = False
    normalize_inputs: bool = False
    resize_inputs: bool = False
    backbone_seed: int = 0
    backbone_weights: str = ""
    head_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.phase1_epochs <= 0 or self.phase2_epochs <= 0:
            raise ValueError("epoch counts must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        OptimizerConfig(self.optimizer, self.lr, self.beta1, self.beta2, self.eps)
        BackboneSpec.create(self.family, self.truncation)

    @property
    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activations"] = list(self.activations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "activations" in d:
            acts = d["activations"]
            d["activations"] = tuple(acts.split("-") if isinstance(acts, str) else acts)
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def seeded_rng(*key) -> np.random.Generator:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


# --------------------------------------------------------------------------
# pairing
# --------------------------------------------------------------------------

@dataclass
class PairedBatch:
    thermal: list[ManifestEntry]
    visible: list[ManifestEntry]
    labels: np.ndarray  # one-hot [N, K]

    def check_paired(self) -> None:
        for i, (t, v) in enumerate(zip(self.thermal, self.visible)):
            if t.subject_id != v.subject_id:
                raise ValueError(f"batch row {i} pairs subject {t.subject_id!r} with "
                                 f"{v.subject_id!r}")


class PairSampler:
    """Seeded stream of identity-paired (off-pose thermal, frontal visible) batches.

    Every thermal image appears once per epoch, in a seeded order; its
    frontal visible partner is re-drawn each epoch.
    """

    def __init__(self, thermal: Sequence[ManifestEntry], visible: Sequence[ManifestEntry],
                 classes: Sequence[str], seed: int, batch_size: int = 32):
        self.thermal = list(thermal)
        self.classes = list(classes)
        self.class_index = {s: i for i, s in enumerate(self.classes)}
        self.seed = seed
        self.batch_size = batch_size
        by_subject: dict[str, list[ManifestEntry]] = {}
        for v in visible:
            by_subject.setdefault(v.subject_id, []).append(v)
        thermal_subjects = {t.subject_id for t in self.thermal}
        for sid in sorted(thermal_subjects | set(by_subject)):
            if sid not in by_subject:
                raise ValueError(f"identity {sid!r} has off-pose thermal images but no frontal "
                                 f"visible image")
            if sid not in thermal_subjects:
                raise ValueError(f"identity {sid!r} has frontal visible images but no off-pose "
                                 f"thermal image")
            if sid not in self.class_index:
                raise ValueError(f"identity {sid!r} is not a training class")
        self.visible_by_subject = by_subject

    def epoch(self, epoch: int) -> Iterator[PairedBatch]:
        rng = seeded_rng("pairs", self.seed, epoch)
        order = rng.permutation(len(self.thermal))
        partners = []
        for i in order:
            cands = self.visible_by_subject[self.thermal[i].subject_id]
            partners.append(cands[int(rng.integers(len(cands)))])
        k = len(self.classes)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            th = [self.thermal[i] for i in idx]
            vis = partners[start:start + self.batch_size]
            labels = ops.one_hot([self.class_index[t.subject_id] for t in th], k)
            yield PairedBatch(th, vis, labels)


def pair_sampler(manifest: Sequence[ManifestEntry], seed: int, batch_size: int = 32,
                 classes: Sequence[str] | None = None, epochs: int | None = None
                 ) -> Iterator[PairedBatch]:
    """Batches over consecutive epochs (forever when ``epochs`` is None)."""
    thermal = [e for e in manifest if e.spectrum == "thermal" and e.pose_class == "off_pose"]
    visible = [e for e in manifest if e.spectrum == "visible" and e.pose_class == "frontal"]
    classes = classes or sorted({e.subject_id for e in thermal} | {e.subject_id for e in visible})
    sampler = PairSampler(thermal, visible, classes, seed, batch_size)
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from sampler.epoch(epoch)
        epoch += 1


# --------------------------------------------------------------------------
# feature cache
# --------------------------------------------------------------------------

class FeatureCache:
    """Backbone features per image path, computed lazily in batches."""

    def __init__(self, model: DpifModel, root=None, normalize: bool = False,
                 resize: bool = False, chunk: int = 64):
        self.model = model
        self.root = root
        self.normalize = normalize
        self.resize = resize
        self.chunk = chunk
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, entries: Sequence[ManifestEntry]) -> np.ndarray:
        missing = list(dict.fromkeys(e.path for e in entries if e.path not in self._cache))
        size = self.model.backbone.spec.input_size
        by_path = {e.path: e for e in entries}
        for start in range(0, len(missing), self.chunk):
            paths = missing[start:start + self.chunk]
            imgs = np.stack([load_image(by_path[p], size, self.root, resize=self.resize,
                                        standardize=self.normalize)
                             for p in paths])
            feats = self.model.features(imgs).data
            for p, f in zip(paths, feats):
                self._cache[p] = f
        return np.stack([self._cache[e.path] for e in entries])


# --------------------------------------------------------------------------
# model assembly
# --------------------------------------------------------------------------

def build_model(config: TrainConfig, num_classes: int, backbone_weights: WeightStore | None = None
                ) -> DpifModel:
    dtype = np.dtype(config.dtype)
    spec = BackboneSpec.create(config.family, config.truncation)
    if backbone_weights is None and config.backbone_weights:
        backbone_weights = load_weight_store(config.backbone_weights)
    backbone = build_backbone(spec, backbone_weights if backbone_weights is not None
                              else config.backbone_seed, dtype=dtype)
    head_cfg = HeadConfig.for_backbone(backbone, embedding_size=config.embedding_size,
                                       num_classes=num_classes, groups=config.groups,
                                       f_width=config.f_width,
                                       activations=tuple(config.activations))
    head = DpitHead(head_cfg, seed=config.head_seed, dtype=dtype)
    return DpifModel(backbone, head)


def phase1_parameters(head: DpitHead):
    return head.select(SHARED + CLASSIFIER)


def phase2_parameters(head: DpitHead):
    return head.select(SHARED + THERMAL_ONLY)


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    phase: int = 1
    epoch: int = 0  # completed epochs within the current phase
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    history: list[dict] = field(default_factory=list)


class Trainer:
    """Runs both phases over a training manifest and writes checkpoints."""

    def __init__(self, model: DpifModel, config: TrainConfig, train_manifest: Sequence[ManifestEntry],
                 root=None, classes: Sequence[str] | None = None, log_path=None,
                 features: FeatureCache | None = None):
        self.model = model
        self.head = model.head
        self.config = config
        self.root = root
        self.log_path = Path(log_path) if log_path else None
        self.frontal = [e for e in train_manifest
                        if e.spectrum == "visible" and e.pose_class == "frontal"
                        and e.condition == "baseline"]
        self.thermal = [e for e in train_manifest
                        if e.spectrum == "thermal" and e.pose_class == "off_pose"]
        if not self.frontal:
            raise ValueError("training set has no frontal visible images")
        subjects = sorted({e.subject_id for e in self.frontal})
        self.classes = list(classes) if classes is not None else subjects
        if len(self.classes) < 2:
            raise ValueError("phase 1 needs at least two identities")
        if self.head.config.num_classes != len(self.classes):
            raise ValueError(f"classifier has {self.head.config.num_classes} outputs but the "
                             f"training set has {len(self.classes)} identities")
        self.class_index = {s: i for i, s in enumerate(self.classes)}
        self.sampler = PairSampler(self.thermal, self.frontal, self.classes, config.seed,
                                   config.batch_size) if self.thermal else None
        self.features = features or FeatureCache(model, root, config.normalize_inputs,
                                                   config.resize_inputs)
        self.state = TrainState()

    # -- single steps ----------------------------------------------------------

    def phase1_step(self, entries: Sequence[ManifestEntry]) -> dict:
        head = self.head
        feats = Tensor(self.features(entries))
        labels = ops.one_hot([self.class_index[e.subject_id] for e in entries],
                             len(self.classes), dtype=feats.dtype)
        params = phase1_parameters(head)
        zero_grad(head.params.values())
        logits = head.classify(head.embed_visible_features(feats))
        loss = ops.softmax_cross_entropy(logits, labels)
        grads = backward(loss)
        optimizer_step(params, grads, self.state.optimizer, self.config.optimizer_config)
        correct = int((logits.data.argmax(axis=1) == labels.argmax(axis=1)).sum())
        return {"loss": float(loss.data), "correct": correct, "n": len(entries)}

    def phase2_step(self, batch: PairedBatch) -> dict:
        batch.check_paired()
        head = self.head
        th_feats = Tensor(self.features(batch.thermal))
        vis_feats = Tensor(self.features(batch.visible))
        labels = batch.labels.astype(th_feats.dtype)
        zero_grad(head.params.values())
        th_emb = head.embed_thermal_features(th_feats)
        vis_emb = head.embed_visible_features(vis_feats)
        l_c = cross_spectrum_loss(th_emb, labels, head)
        l_p = pose_correction_loss(vis_emb, th_emb, self.config.detach_visible)
        loss = joint_loss(l_c, l_p, self.config.lam)
        grads = backward(loss)
        if any(k.startswith("classifier.") for k in grads):
            raise RuntimeError("classifier received gradients while frozen")
        optimizer_step(phase2_parameters(head), grads, self.state.optimizer,
                       self.config.optimizer_config)
        return {"l_c": float(l_c.data), "l_p": float(l_p.data), "loss": float(loss.data),
                "n": len(batch.thermal)}

    # -- epochs ------------------------------------------------------------------

    def _phase1_epoch(self, epoch: int) -> dict:
        rng = seeded_rng("phase1", self.config.seed, epoch)
        order = rng.permutation(len(self.frontal))
        bs = self.config.batch_size
        losses, correct, n = [], 0, 0
        for start in range(0, len(order), bs):
            out = self.phase1_step([self.frontal[i] for i in order[start:start + bs]])
            losses.append(out["loss"] * out["n"])
            correct += out["correct"]
            n += out["n"]
        return {"phase": 1, "epoch": epoch + 1, "l_c": sum(losses) / n, "l_p": 0.0,
                "loss": sum(losses) / n, "train_accuracy": correct / n}

    def _phase2_epoch(self, epoch: int) -> dict:
        if self.sampler is None:
            raise ValueError("training set has no off-pose thermal images")
        sums = {"l_c": 0.0, "l_p": 0.0, "loss": 0.0}
        n = 0
        for batch in self.sampler.epoch(epoch):
            out = self.phase2_step(batch)
            for k in sums:
                sums[k] += out[k] * out["n"]
            n += out["n"]
        return {"phase": 2, "epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}

    def _log(self, record: dict, seconds: float) -> None:
        logger.info("phase %d epoch %d  L_C %.6g  L_P %.6g  L %.6g", record["phase"],
                    record["epoch"], record["l_c"], record["l_p"], record["loss"])
        if self.log_path is None:
            return
        new = not self.log_path.exists()
        with open(self.log_path, "a") as fh:
            if new:
                fh.write("phase,epoch,l_c,l_p,loss,wall_seconds\n")
            fh.write(f"{record['phase']},{record['epoch']},{record['l_c']!r},{record['l_p']!r},"
                     f"{record['loss']!r},{seconds:.3f}\n")

    def start_phase2(self) -> None:
        self.head.freeze_classifier()
        self.state.phase = 2
        self.state.epoch = 0
        self.state.optimizer = OptimizerState()

    def run(self, max_epochs: int | None = None) -> TrainState:
        """Train until done, or until ``max_epochs`` more epochs have run."""
        budget = max_epochs if max_epochs is not None else -1
        st = self.state
        while st.phase in (1, 2) and budget != 0:
            if st.phase == 1 and st.epoch >= self.config.phase1_epochs:
                self.start_phase2()
                continue
            if st.phase == 2 and st.epoch >= self.config.phase2_epochs:
                st.phase = 3
                break
            t0 = time.perf_counter()
            record = (self._phase1_epoch if st.phase == 1 else self._phase2_epoch)(st.epoch)
            st.epoch += 1
            st.history.append(record)
            self._log(record, time.perf_counter() - t0)
            budget -= 1
        if st.phase == 2 and st.epoch >= self.config.phase2_epochs:
            st.phase = 3
        if st.phase == 1 and st.epoch >= self.config.phase1_epochs:
            self.start_phase2()
        return st

    @property
    def done(self) -> bool:
        return self.state.phase == 3

    # -- checkpoints -------------------------------------------------------------

    def checkpoint_store(self) -> WeightStore:
        head = self.head
        st = self.state
        store = WeightStore()
        for name, p in head.params.items():
            store[f"head.{name}"] = p.data
        for name in sorted(st.optimizer.m):
            store[f"optim.m.{name}"] = st.optimizer.m[name]
            store[f"optim.v.{name}"] = st.optimizer.v[name]
        store.metadata = {
            "kind": "dpif-checkpoint",
            "format_version": 1,
            "model": {"family": self.config.family, "truncation": self.config.truncation,
                      "embedding_size": head.config.embedding_size, "groups": head.config.groups,
                      "activations": list(head.config.activations),
                      "num_classes": head.config.num_classes, "head": head.config.to_dict()},
            "config": self.config.to_dict(),
            "classes": self.classes,
            "phase": st.phase,
            "epoch": st.epoch,
            "optimizer_step": st.optimizer.step,
            "classifier_trainable": head.classifier_trainable,
            "history": st.history,
        }
        return store

    def save_checkpoint(self, path) -> None:
        save_weight_store(self.checkpoint_store(), path)

    def restore(self, store: WeightStore) -> None:
        meta = store.metadata
        if meta.get("kind") != "dpif-checkpoint":
            raise ValueError("not a training checkpoint")
        if meta["classes"] != self.classes:
            raise ValueError("checkpoint classes do not match the training manifest")
        self.head.load_arrays({k[5:]: v for k, v in store.entries.items()
                               if k.startswith("head.")})
        self.head.set_trainable(CLASSIFIER, meta["classifier_trainable"])
        opt = OptimizerState(step=meta["optimizer_step"])
        for k, v in store.entries.items():
            if k.startswith("optim.m."):
                opt.m[k[8:]] = v.copy()
            elif k.startswith("optim.v."):
                opt.v[k[8:]] = v.copy()
        self.state = TrainState(meta["phase"], meta["epoch"], opt, list(meta["history"]))


def load_checkpoint(path, backbone_weights: WeightStore | None = None
                    ) -> tuple[DpifModel, TrainConfig, WeightStore]:
    """Rebuild the model stored in a checkpoint (head weights and freeze state)."""
    store = load_weight_store(path)
    meta = store.metadata
    if meta.get("kind") != "dpif-checkpoint":
        raise ValueError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    model = build_model(config, meta["model"]["num_classes"], backbone_weights)
    model.head.load_arrays({k[5:]: v for k, v in store.entries.items() if k.startswith("head.")})
    model.head.set_trainable(CLASSIFIER, meta["classifier_trainable"])
    return model, config, store


def train_phase1(model: DpifModel, trainset: Sequence[ManifestEntry], config: TrainConfig,
                 root=None) -> DpifModel:
    """Fit shared layers and classifier on frontal visible images."""
    if not trainset:
        raise ValueError("empty training set")
    trainer = Trainer(model, config, trainset, root)
    trainer.run(max_epochs=config.phase1_epochs)
    return model


def train_phase2(model: DpifModel, paired_trainset: Sequence[ManifestEntry], config: TrainConfig,
                 root=None) -> DpifModel:
    """Thermal-stream training with the classifier frozen."""
    trainer = Trainer(model, config, paired_trainset, root)
    trainer.start_phase2()
    trainer.run(max_epochs=config.phase2_epochs)
    return model

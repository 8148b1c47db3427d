"""Manifests, gallery/probe protocols, image loading and synthetic data.

Manifest files are CSV with the header::

    path,subject_id,spectrum,pose_class,yaw_degrees,condition,glasses,glasses_owner

``path`` is relative to the manifest's directory. ``glasses`` says whether
glasses are worn in the image; ``glasses_owner`` whether the subject
normally wears them (needed to tell the "0" and "-" protocol suffixes
apart). Images are binary PGM (thermal) or PPM (visible).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SPECTRA = ("visible", "thermal")
POSE_CLASSES = ("frontal", "off_pose")
CONDITIONS = ("baseline", "expression", "pose", "eyewear")
MANIFEST_HEADER = ("path", "subject_id", "spectrum", "pose_class", "yaw_degrees",
                   "condition", "glasses", "glasses_owner")
FRONTAL_THRESHOLD = 10.0
MAX_YAW = 90.0


class ManifestError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    spectrum: str
    pose_class: str
    yaw_degrees: float | None
    condition: str
    glasses: bool
    path: str
    glasses_owner: bool = False

    def validate(self, frontal_threshold: float = FRONTAL_THRESHOLD) -> None:
        if not self.subject_id:
            raise ManifestError("empty subject_id")
        if self.spectrum not in SPECTRA:
            raise ManifestError(f"spectrum must be one of {SPECTRA}, got {self.spectrum!r}")
        if self.pose_class not in POSE_CLASSES:
            raise ManifestError(f"pose_class must be one of {POSE_CLASSES}, got {self.pose_class!r}")
        if self.condition not in CONDITIONS:
            raise ManifestError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        if self.yaw_degrees is not None:
            if not math.isfinite(self.yaw_degrees) or abs(self.yaw_degrees) > MAX_YAW:
                raise ManifestError(f"yaw {self.yaw_degrees} outside [-90, 90]")
            if self.pose_class == "frontal" and abs(self.yaw_degrees) > frontal_threshold:
                raise ManifestError(f"frontal entry has yaw {self.yaw_degrees} beyond "
                                    f"+-{frontal_threshold}")
        if self.glasses and not self.glasses_owner:
            raise ManifestError("glasses worn by a subject not marked as a glasses owner")
        if not self.path:
            raise ManifestError("empty path")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ManifestError(f"not a boolean: {text!r}")


def _format_yaw(yaw: float | None) -> str:
    return "" if yaw is None else repr(float(yaw))


def write_manifest(entries: Iterable[ManifestEntry], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.path, e.subject_id, e.spectrum, e.pose_class, _format_yaw(e.yaw_degrees),
                        e.condition, int(e.glasses), int(e.glasses_owner)])


def load_manifest(path: str | os.PathLike,
                  frontal_threshold: float = FRONTAL_THRESHOLD) -> list[ManifestEntry]:
    """Read and validate a manifest; an empty file yields an empty list."""
    text = Path(path).read_text()
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            p, sid, spectrum, pose, yaw, cond, glasses, owner = (c.strip() for c in row)
            try:
                yaw_val = float(yaw) if yaw else None
            except ValueError:
                raise ManifestError(f"yaw {yaw!r} is not a number") from None
            entry = ManifestEntry(sid, spectrum, pose, yaw_val, cond, _parse_bool(glasses), p,
                                  _parse_bool(owner))
            entry.validate(frontal_threshold)
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if p in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {p!r} (first on line {seen[p]})")
        seen[p] = lineno
        entries.append(entry)
    return entries


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------

ROLES = ("gallery", "probe", "train", "validation")


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    role: str
    predicate: Callable[[ManifestEntry], bool] = field(compare=False)
    subjects: frozenset[str] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    def select(self, manifest: Sequence[ManifestEntry]) -> list[ManifestEntry]:
        return [e for e in manifest
                if (self.subjects is None or e.subject_id in self.subjects) and self.predicate(e)]


def _frontal_baseline(spectrum: str):
    return lambda e: (e.spectrum == spectrum and e.pose_class == "frontal"
                      and e.condition == "baseline")


def standard_protocols(train_subjects: Iterable[str] | None,
                       test_subjects: Iterable[str] | None) -> list[ProtocolSpec]:
    """Gallery/probe sets with the usual glasses suffixes, plus training sets.

    Suffix ``0``: subjects without glasses; ``-``: glasses owners not wearing
    them; ``+``: owners wearing them. ``P_TP`` is every off-pose thermal probe.
    """
    tr = None if train_subjects is None else frozenset(train_subjects)
    te = None if test_subjects is None else frozenset(test_subjects)
    vis_fb = _frontal_baseline("visible")
    th_fb = _frontal_baseline("thermal")

    def thermal(cond: str):
        return lambda e: e.spectrum == "thermal" and e.condition == cond

    def offpose_thermal(e):
        return e.spectrum == "thermal" and e.pose_class == "off_pose"

    def no_owner(e):
        return not e.glasses_owner

    def owner_off(e):
        return e.glasses_owner and not e.glasses

    def owner_on(e):
        return e.glasses_owner and e.glasses

    specs = [
        ProtocolSpec("train_visible_frontal", "train", lambda e: vis_fb(e) and not e.glasses, tr),
        ProtocolSpec("train_thermal_offpose", "train", offpose_thermal, tr),
        ProtocolSpec("G_VB0-", "gallery", lambda e: vis_fb(e) and not e.glasses, te),
        ProtocolSpec("G_VB0+", "gallery", lambda e: vis_fb(e) and e.glasses == e.glasses_owner, te),
        ProtocolSpec("P_TB0", "probe", lambda e: th_fb(e) and no_owner(e), te),
        ProtocolSpec("P_TB-", "probe", lambda e: th_fb(e) and owner_off(e), te),
        ProtocolSpec("P_TB+", "probe", lambda e: th_fb(e) and owner_on(e), te),
        ProtocolSpec("P_TE0", "probe", lambda e: thermal("expression")(e) and no_owner(e), te),
        ProtocolSpec("P_TE-", "probe", lambda e: thermal("expression")(e) and owner_off(e), te),
        ProtocolSpec("P_TP0", "probe", lambda e: offpose_thermal(e) and no_owner(e), te),
        ProtocolSpec("P_TP-", "probe", lambda e: offpose_thermal(e) and owner_off(e), te),
        ProtocolSpec("P_TP", "probe", lambda e: offpose_thermal(e) and not e.glasses, te),
    ]
    return specs


def build_protocol(manifest: Sequence[ManifestEntry],
                   specs: Sequence[ProtocolSpec]) -> dict[str, list[ManifestEntry]]:
    """Named subsets of ``manifest``; train and evaluation subjects must not overlap."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ProtocolError("duplicate protocol names")
    splits = {s.name: s.select(manifest) for s in specs}
    train = {e.subject_id for s in specs if s.role == "train" for e in splits[s.name]}
    test = {e.subject_id for s in specs if s.role != "train" for e in splits[s.name]}
    overlap = sorted(train & test)
    if overlap:
        raise ProtocolError(f"subjects in both train and test splits: {', '.join(overlap)}")
    return splits


def protocol_roles(specs: Sequence[ProtocolSpec]) -> dict[str, str]:
    return {s.name: s.role for s in specs}


# --------------------------------------------------------------------------
# image IO
# --------------------------------------------------------------------------

def resolve_path(entry: ManifestEntry | str | os.PathLike, root=None) -> Path:
    p = Path(entry.path if isinstance(entry, ManifestEntry) else entry)
    return p if root is None or p.is_absolute() else Path(root) / p


def load_image(entry: ManifestEntry | str | os.PathLike, target_size: int | None = None,
               root=None, resize: bool = False, standardize: bool = False) -> np.ndarray:
    """Decode an 8-bit image to float32 [H, W, 3] in [0, 1].

    Grayscale input is replicated over the three channels. With
    ``standardize`` each channel is shifted/scaled to zero mean, unit variance.
    """
    path = resolve_path(entry, root)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            if target_size is not None and img.size != (target_size, target_size):
                if not resize:
                    raise ValueError(f"{path}: image is {img.size[0]}x{img.size[1]}, expected "
                                     f"{target_size}x{target_size} (enable resize to rescale)")
                img = img.resize((target_size, target_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from None
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if standardize:
        mean = arr.mean(axis=(0, 1), keepdims=True)
        std = arr.std(axis=(0, 1), keepdims=True)
        arr = (arr - mean) / np.where(std > 0, std, 1.0)
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_images(entries: Sequence[ManifestEntry], target_size: int | None = None, root=None,
                **kwargs) -> np.ndarray:
    return np.stack([load_image(e, target_size, root, **kwargs) for e in entries])


# --------------------------------------------------------------------------
# synthetic paired-spectrum generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic face-like renderer.

    Each subject is a constellation of Gaussian blobs inside an elliptical
    face plus a fine identity texture. Yaw acts as a horizontal shear and
    shift. The thermal image is the blurred, inverted and gamma-warped
    luminance of the visible render.
    """

    seed: int = 0
    num_subjects: int = 20
    test_subjects: int = 8
    images_per_cell: int = 1
    image_size: int = 32
    yaw_grid: tuple[float, ...] = (-60.0, -30.0, 0.0, 30.0, 60.0)
    num_blobs: int = 5
    blob_contrast: float = 0.6
    blob_color_spread: float = 0.05
    glasses_owner_fraction: float = 0.3
    shear_per_90: float = 0.6
    shift_per_90: float = 0.18
    texture_amplitude: float = 0.12
    thermal_blur: float = 1.2
    thermal_gamma: float = 1.6
    noise: float = 0.02
    jitter_px: float = 0.75

    def __post_init__(self):
        if self.num_subjects < 2:
            raise ValueError("need at least two subjects")
        if not 0 <= self.test_subjects < self.num_subjects:
            raise ValueError("test_subjects must be in [0, num_subjects)")
        if self.images_per_cell < 1 or self.image_size < 8:
            raise ValueError("images_per_cell >= 1 and image_size >= 8 required")
        if any(abs(y) > MAX_YAW for y in self.yaw_grid):
            raise ValueError("yaw grid values must lie in [-90, 90]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["yaw_grid"] = list(self.yaw_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "yaw_grid" in d:
            d["yaw_grid"] = tuple(float(y) for y in d["yaw_grid"])
        return cls(**d)


def _rng(*key) -> np.random.Generator:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class _Identity:
    centers: np.ndarray  # [B, 2] in face coords
    sigmas: np.ndarray
    amps: np.ndarray  # [B, 3]
    skin: np.ndarray  # [3]
    tex_freq: np.ndarray  # [2]
    tex_phase: float


def _identity(cfg: SyntheticConfig, subject: int) -> _Identity:
    r = _rng("identity", cfg.seed, subject)
    b = cfg.num_blobs
    return _Identity(
        centers=np.stack([r.uniform(-0.6, 0.6, b), r.uniform(-0.7, 0.7, b)], axis=1),
        sigmas=r.uniform(0.10, 0.25, b),
        amps=(r.uniform(-cfg.blob_color_spread, cfg.blob_color_spread, (b, 3))
              + r.choice([-cfg.blob_contrast, cfg.blob_contrast], (b, 1))),
        skin=r.uniform(0.45, 0.7, 3),
        tex_freq=r.uniform(6.0, 11.0, 2) * r.choice([-1, 1], 2),
        tex_phase=float(r.uniform(0, 2 * np.pi)),
    )


def render_visible(cfg: SyntheticConfig, ident: _Identity, yaw: float,
                   rng: np.random.Generator) -> np.ndarray:
    """RGB float image in [0, 1] for one subject at one yaw."""
    s = cfg.image_size
    coords = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    t = yaw / 90.0
    jitter = rng.normal(0, cfg.jitter_px / s * 2.0, 2)
    # image -> face coordinates: undo shift and shear
    v = y - jitter[1]
    u = x - jitter[0] - cfg.shift_per_90 * t - cfg.shear_per_90 * t * v
    face = ((u / 0.8) ** 2 + (v / 0.95) ** 2) <= 1.0
    edge = np.clip(1.0 - ((u / 0.8) ** 2 + (v / 0.95) ** 2), 0, 0.15) / 0.15
    img = np.full((s, s, 3), 0.08)
    img += (face * edge)[..., None] * ident.skin
    amp_scale = 1.0 + rng.normal(0, 0.05, ident.amps.shape)
    for (cu, cv), sig, amp in zip(ident.centers, ident.sigmas, ident.amps * amp_scale):
        g = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * sig * sig))
        img += (g * edge)[..., None] * amp
    tex = np.sin(np.pi * (ident.tex_freq[0] * u + ident.tex_freq[1] * v) + ident.tex_phase)
    img += (cfg.texture_amplitude * tex * edge)[..., None]
    img += rng.normal(0, cfg.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def visible_to_thermal(cfg: SyntheticConfig, visible: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Grayscale float image in [0, 1]: blur, invert, gamma."""
    lum = visible @ np.array([0.299, 0.587, 0.114])
    blurred = gaussian_filter(lum, cfg.thermal_blur, mode="nearest")
    therm = (1.0 - blurred) ** cfg.thermal_gamma
    therm = therm + rng.normal(0, cfg.noise, therm.shape)
    return np.clip(therm, 0.0, 1.0)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


@dataclass
class SyntheticDataset:
    root: Path
    manifest: list[ManifestEntry]
    train_subjects: list[str]
    test_subjects: list[str]


def subject_name(i: int) -> str:
    return f"s{i:03d}"


def synth_generate(config: SyntheticConfig, out_dir: str | os.PathLike) -> SyntheticDataset:
    """Render the synthetic dataset and write images plus manifests.

    Writes ``manifest.csv`` (everything), ``train.csv`` and ``test.csv``
    (subject-disjoint) and ``synth_config.json`` under ``out_dir``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write synthetic data to {out}: {exc}") from None

    split_rng = _rng("split", config.seed)
    order = split_rng.permutation(config.num_subjects)
    test_idx = set(int(i) for i in order[:config.test_subjects])
    owner_rng = _rng("owners", config.seed)
    owners = set(int(i) for i in owner_rng.permutation(config.num_subjects)
                 [:int(round(config.glasses_owner_fraction * config.num_subjects))])

    entries: list[ManifestEntry] = []
    for si in range(config.num_subjects):
        sid = subject_name(si)
        ident = _identity(config, si)
        (out / sid).mkdir(exist_ok=True)
        for yaw in config.yaw_grid:
            frontal = abs(yaw) <= FRONTAL_THRESHOLD
            for k in range(config.images_per_cell):
                rng = _rng("image", config.seed, si, float(yaw), k)
                vis = render_visible(config, ident, yaw, rng)
                therm = visible_to_thermal(config, vis, rng)
                tag = f"{int(round(yaw)):+03d}_{k}"
                for spectrum, img, ext in (("visible", vis, "ppm"), ("thermal", therm, "pgm")):
                    rel = f"{sid}/{spectrum}_{tag}.{ext}"
                    Image.fromarray(_to_u8(img)).save(out / rel)
                    entries.append(ManifestEntry(
                        subject_id=sid, spectrum=spectrum,
                        pose_class="frontal" if frontal else "off_pose",
                        yaw_degrees=float(yaw),
                        condition="baseline" if frontal else "pose",
                        glasses=False, path=rel, glasses_owner=si in owners))
    train_subjects = [subject_name(i) for i in range(config.num_subjects) if i not in test_idx]
    test_subjects = [subject_name(i) for i in sorted(test_idx)]
    write_manifest(entries, out / "manifest.csv")
    write_manifest([e for e in entries if e.subject_id in train_subjects], out / "train.csv")
    write_manifest([e for e in entries if e.subject_id in test_subjects], out / "test.csv")
    (out / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True)
                                           + "\n")
    return SyntheticDataset(out, entries, train_subjects, test_subjects)

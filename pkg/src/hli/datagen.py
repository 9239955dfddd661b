"""Synthetic source/target re-ID datasets with a controllable domain shift.

Each identity is a parametric "glyph" person (head, torso, legs) whose shape
and colours come from an identity-seeded generator.  Samples add pose jitter,
per-camera colour casts, brightness changes and sensor noise.  Target samples
additionally pass through a global domain transform whose strength is set by
``shift_magnitude``.
"""

from __future__ import annotations

import csv
import dataclasses
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"
_DOMAIN_CODE = {SOURCE: 0, TARGET: 1}


@dataclass(frozen=True)
class SampleRecord:
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    identity: int
    domain: str
    nuisance_id: int
    pseudo_label: int = -1


@dataclass(frozen=True)
class DatasetSpec:
    n_identities_source: int = 16
    n_identities_target: int = 16
    samples_per_identity: int = 24
    image_height: int = 64
    image_width: int = 32
    shift_magnitude: float = 0.6
    n_cameras: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.n_identities_source < 1 or self.n_identities_target < 1:
            raise ValueError("dataset needs at least one identity per domain")
        if self.samples_per_identity < 1:
            raise ValueError("samples_per_identity must be positive")
        if self.image_height < 1 or self.image_width < 1:
            raise ValueError("image size must have positive area")
        if not 0.0 <= self.shift_magnitude <= 1.0:
            raise ValueError("shift_magnitude must lie in [0, 1]")
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be positive")


@dataclass(frozen=True)
class Glyph:
    shape: int  # 0 rectangle torso, 1 ellipse torso, 2 trapezoid torso
    head_color: np.ndarray
    torso_color: np.ndarray
    legs_color: np.ndarray
    torso_width: float  # fraction of image width
    stripe: bool


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def identity_glyph(seed: int, identity: int) -> Glyph:
    rng = _rng(seed, 7919, identity)
    return Glyph(
        shape=int(rng.integers(3)),
        head_color=rng.uniform(0.1, 0.9, 3),
        torso_color=rng.uniform(0.05, 0.95, 3),
        legs_color=rng.uniform(0.05, 0.95, 3),
        torso_width=float(rng.uniform(0.4, 0.7)),
        stripe=bool(rng.random() < 0.5),
    )


CAST_BASE = 0.06
CAST_SHIFT = 0.04
CLUTTER = 1.0


def _camera_cast(seed: int, domain: str, camera: int, shift: float) -> np.ndarray:
    # additive per-channel colour cast of one synthetic camera; target cameras
    # drift away from the shared base cast as the shift grows
    base = _rng(seed, 104729, camera).uniform(-CAST_BASE, CAST_BASE, 3)
    drift = _rng(seed, 130363, _DOMAIN_CODE[domain], camera).uniform(-1.0, 1.0, 3)
    return base + CAST_SHIFT * shift * drift


def _hue_rotation(angle: float) -> np.ndarray:
    # rotation about the grey axis (Rodrigues); exactly the identity at angle 0
    k = np.full((3, 3), 1.0 / 3.0)
    c = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / np.sqrt(3.0)
    return np.cos(angle) * np.eye(3) + (1.0 - np.cos(angle)) * k + np.sin(angle) * c


def _camera_background(h: int, w: int, seed: int, camera: int) -> np.ndarray:
    yy = np.mgrid[0:h, 0:w][0].astype(np.float64)
    rng = _rng(seed, 15485863, camera)
    base = 0.45 + 0.1 * (yy / h) + rng.uniform(-0.05, 0.05)
    return np.repeat(base[..., None], 3, axis=2)


def _clutter(h: int, w: int, params: np.ndarray) -> np.ndarray:
    # two oriented colour gratings; params come from the per-sample stream
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w, 3))
    for freq, theta, phase, *rgb in params:
        wave = 0.5 + 0.5 * np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        out += wave[..., None] * np.asarray(rgb)
    return out / len(params)


def render_sample(
    glyph: Glyph,
    domain_shift: float,
    camera_cast: np.ndarray,
    background: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one image.  Source and target share this chain; only
    ``domain_shift`` differs (0 for source)."""
    h, w, _ = background.shape
    # identical draws in both domains, so shift=0 reproduces the source chain exactly
    dx, dy = rng.integers(-3, 4, size=2)
    scale = rng.uniform(0.9, 1.1)
    brightness = rng.uniform(0.8, 1.2)
    sensor = rng.normal(0.0, 0.03, size=(h, w, 3))
    domain_noise = rng.normal(0.0, 0.06, size=(h, w, 3))
    clutter_params = np.column_stack(
        [rng.uniform(0.3, 1.5, 2), rng.uniform(0, np.pi, 2), rng.uniform(0, 2 * np.pi, 2), rng.uniform(0.0, 1.0, (2, 3))]
    )

    mix = CLUTTER * domain_shift
    img = (1.0 - mix) * background + mix * _clutter(h, w, clutter_params)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = w / 2.0 + dx
    top = 0.08 * h + dy
    head_r = 0.09 * h * scale
    torso_top = top + 2 * head_r
    torso_h = 0.38 * h * scale
    legs_h = 0.34 * h * scale
    half = glyph.torso_width * w / 2.0 * scale

    head = (yy - (top + head_r)) ** 2 + ((xx - cx) * 1.3) ** 2 <= head_r**2
    ty = (yy - torso_top) / torso_h
    in_rows = (ty >= 0) & (ty <= 1)
    if glyph.shape == 0:
        torso = in_rows & (np.abs(xx - cx) <= half)
    elif glyph.shape == 1:
        torso = ((ty - 0.5) / 0.5) ** 2 + ((xx - cx) / half) ** 2 <= 1.0
    else:
        torso = in_rows & (np.abs(xx - cx) <= half * (0.6 + 0.5 * ty))
    legs_top = torso_top + torso_h
    leg_rows = (yy >= legs_top) & (yy <= legs_top + legs_h)
    legs = leg_rows & (np.abs(np.abs(xx - cx) - 0.22 * half - 1.5) <= 0.3 * half + 1.0)

    img[legs] = glyph.legs_color
    img[torso] = glyph.torso_color
    if glyph.stripe:
        band = torso & (np.abs(ty - 0.5) < 0.12)
        img[band] = 1.0 - glyph.torso_color
    img[head] = glyph.head_color

    img = img + camera_cast
    img = img * brightness
    img = img + sensor

    # global domain transform: hue rotation, contrast loss, colour cast, extra noise
    img = img @ _hue_rotation(domain_shift * np.pi / 2.0).T
    mean = img.mean()
    img = mean + (1.0 - 0.5 * domain_shift) * (img - mean)
    img = img + domain_shift * np.array([0.08, -0.04, 0.06])
    img = img + domain_shift * domain_noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_domain(spec: DatasetSpec, domain: str, identities: range) -> list[SampleRecord]:
    shift = spec.shift_magnitude if domain == TARGET else 0.0
    bgs = [_camera_background(spec.image_height, spec.image_width, spec.seed, cam) for cam in range(spec.n_cameras)]
    casts = [_camera_cast(spec.seed, domain, cam, shift) for cam in range(spec.n_cameras)]
    records = []
    for identity in identities:
        glyph = identity_glyph(spec.seed, identity)
        for k in range(spec.samples_per_identity):
            cam = k % spec.n_cameras
            rng = _rng(spec.seed, _DOMAIN_CODE[domain], identity, k)
            image = render_sample(glyph, shift, casts[cam], bgs[cam], rng)
            records.append(SampleRecord(image, identity, domain, cam))
    return records


def generate_domain_pair(spec: DatasetSpec) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Return (source, target) record lists; identity sets are disjoint
    (target identities are offset by ``n_identities_source``)."""
    spec.validate()
    n_s = spec.n_identities_source
    source = _render_domain(spec, SOURCE, range(n_s))
    target = _render_domain(spec, TARGET, range(n_s, n_s + spec.n_identities_target))
    return source, target


class LabelAccessError(RuntimeError):
    pass


class TargetView:
    """Target-domain records with ground-truth identities withheld.

    Training code sees images, nuisance ids and pseudo labels.  Ground truth
    is reachable only through :meth:`reveal_identities`, which is logged, and
    which refuses to answer while a gradient step is open.
    """

    def __init__(self, records: Sequence[SampleRecord]):
        self._records = list(records)
        self._pseudo = np.full(len(self._records), -1, dtype=np.int64)
        self._in_gradient_step = False
        self.reads: list[str] = []
        self.reads_during_gradient = 0

    def __len__(self) -> int:
        return len(self._records)

    @property
    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self._records])

    @property
    def nuisance_ids(self) -> np.ndarray:
        return np.array([r.nuisance_id for r in self._records], dtype=np.int64)

    @property
    def pseudo_labels(self) -> np.ndarray:
        return self._pseudo.copy()

    def set_pseudo_labels(self, labels: np.ndarray) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != self._pseudo.shape:
            raise ValueError("pseudo label count does not match the dataset")
        self._pseudo = labels.copy()

    def reveal_identities(self, purpose: str) -> np.ndarray:
        if self._in_gradient_step:
            self.reads_during_gradient += 1
            raise LabelAccessError(f"target ground truth read inside a gradient step ({purpose})")
        self.reads.append(purpose)
        return np.array([r.identity for r in self._records], dtype=np.int64)

    @contextmanager
    def gradient_step(self) -> Iterator[None]:
        self._in_gradient_step = True
        try:
            yield
        finally:
            self._in_gradient_step = False


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray  # N x C x H x W
    labels: np.ndarray


def to_chw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


def sample_pk_indices(labels: np.ndarray, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    if P < 2 or K < 2:
        raise ValueError("PK sampling needs P >= 2 and K >= 2")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    classes = np.unique(labels)
    if classes.size < P:
        raise ValueError(f"dataset has {classes.size} distinct identities, fewer than P={P}")
    chosen = rng.choice(classes, size=P, replace=False)
    out = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        out.append(rng.choice(members, size=K, replace=members.size < K))
    return np.concatenate(out)


def make_pk_batch(
    dataset: Sequence[SampleRecord] | TargetView,
    P: int,
    K: int,
    rng: np.random.Generator,
) -> Batch:
    """P identities x K samples.  For a :class:`TargetView` the pseudo labels
    are the grouping key; for plain records the identity is."""
    if isinstance(dataset, TargetView):
        labels = dataset.pseudo_labels
        records = dataset._records
    else:
        labels = np.array([r.identity for r in dataset], dtype=np.int64)
        records = dataset
    idx = sample_pk_indices(labels, P, K, rng)
    images = to_chw(np.stack([records[i].image for i in idx]))
    return Batch(idx, images, labels[idx])


def relabel(records: Sequence[SampleRecord], labels: Sequence[int]) -> list[SampleRecord]:
    if len(records) != len(labels):
        raise ValueError("label count does not match record count")
    return [dataclasses.replace(r, pseudo_label=int(l)) for r, l in zip(records, labels)]


MANIFEST_COLUMNS = ("path", "identity", "domain", "nuisance_id")


def dump_dataset(records: Sequence[SampleRecord], directory: str | Path) -> Path:
    """Write PNG images plus ``manifest.csv``.  PNG stores 8 bits per channel,
    so a reload is quantised to multiples of 1/255."""
    from PIL import Image

    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for i, r in enumerate(records):
            rel = f"images/{r.domain}_{i:05d}.png"
            pixels = np.round(r.image * 255.0).astype(np.uint8)
            Image.fromarray(pixels).save(directory / rel)
            writer.writerow([rel, r.identity, r.domain, r.nuisance_id])
    return manifest


def load_dataset(directory: str | Path) -> list[SampleRecord]:
    from PIL import Image

    directory = Path(directory)
    records = []
    with (directory / "manifest.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            pixels = np.asarray(Image.open(directory / row["path"]).convert("RGB"))
            records.append(
                SampleRecord(
                    (pixels.astype(np.float32) / 255.0),
                    int(row["identity"]),
                    row["domain"],
                    int(row["nuisance_id"]),
                )
            )
    return records

"""Synthetic two-modality phantom datasets for cross-modal segmentation.

The same anatomy (one-hot label maps of wobbly elliptical structures on a
background) is rendered under two different nonlinear intensity mappings,
giving a fully labeled prior set (modality A), a partially labeled training
set (modality B, seen classes only) and the hidden fully labeled mirror of
the modality-B set used for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

BACKGROUND = 0


# ---------------------------------------------------------------------------
# anatomy layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructureTemplate:
    """One blob-like structure: a rotated ellipse with a wavy boundary.

    All geometric quantities are fractions of the image side, so the same
    template works at any resolution.
    """

    name: str
    center_box: tuple[float, float, float, float]  # (y_lo, y_hi, x_lo, x_hi)
    axis_y: tuple[float, float]                    # semi-axis range, fraction
    axis_x: tuple[float, float]
    max_rotation: float = 0.4                      # radians
    wobble_amp: float = 0.08
    wobble_harmonics: tuple[int, ...] = (3, 4, 5)


@dataclass(frozen=True)
class LayoutConfig:
    """Image size plus the ordered structure templates.

    Later templates take precedence on overlap (they overwrite earlier
    ones), which keeps labels one-hot without rejection sampling.
    """

    size: int = 64
    structures: tuple[StructureTemplate, ...] = ()
    max_attempts: int = 100

    @property
    def num_classes(self) -> int:
        return len(self.structures) + 1

    @property
    def class_names(self) -> tuple[str, ...]:
        return ("background",) + tuple(s.name for s in self.structures)

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "max_attempts": self.max_attempts,
            "structures": [
                {
                    "name": s.name,
                    "center_box": list(s.center_box),
                    "axis_y": list(s.axis_y),
                    "axis_x": list(s.axis_x),
                    "max_rotation": s.max_rotation,
                    "wobble_amp": s.wobble_amp,
                    "wobble_harmonics": list(s.wobble_harmonics),
                }
                for s in self.structures
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "LayoutConfig":
        structures = tuple(
            StructureTemplate(
                name=s["name"],
                center_box=tuple(s["center_box"]),
                axis_y=tuple(s["axis_y"]),
                axis_x=tuple(s["axis_x"]),
                max_rotation=s["max_rotation"],
                wobble_amp=s["wobble_amp"],
                wobble_harmonics=tuple(s["wobble_harmonics"]),
            )
            for s in d["structures"]
        )
        return LayoutConfig(size=d["size"], structures=structures,
                            max_attempts=d["max_attempts"])


def default_layout(size: int = 64) -> LayoutConfig:
    """Four structures + background: one large, two small, one medium blob.

    Placement regions are fixed per structure so the anatomy has a
    consistent spatial arrangement across samples.
    """
    structures = (
        StructureTemplate("organ_a", (0.32, 0.42, 0.28, 0.40),
                          axis_y=(0.15, 0.20), axis_x=(0.20, 0.26)),
        StructureTemplate("organ_b", (0.62, 0.72, 0.22, 0.32),
                          axis_y=(0.08, 0.105), axis_x=(0.08, 0.105)),
        StructureTemplate("organ_c", (0.62, 0.72, 0.68, 0.78),
                          axis_y=(0.08, 0.11), axis_x=(0.08, 0.11)),
        StructureTemplate("organ_d", (0.26, 0.36, 0.68, 0.78),
                          axis_y=(0.12, 0.16), axis_x=(0.09, 0.12)),
    )
    return LayoutConfig(size=size, structures=structures)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class LabelMap:
    """One-hot label tensor of shape (H, W, C); channel 0 is background."""

    grid: np.ndarray
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return self.grid.shape[-1]

    @property
    def index_map(self) -> np.ndarray:
        return np.argmax(self.grid, axis=-1)

    def validate(self) -> None:
        if self.grid.ndim != 3 or self.grid.shape[-1] != len(self.class_names):
            raise ValueError("label grid shape does not match class names")
        vals = np.unique(self.grid)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("label grid is not binary")
        if not np.all(self.grid.sum(axis=-1) == 1):
            raise ValueError("label grid is not one-hot")
        counts = self.grid.reshape(-1, self.num_classes).sum(axis=0)
        if np.any(counts == 0):
            empty = [self.class_names[i] for i in np.flatnonzero(counts == 0)]
            raise ValueError(f"empty classes in label map: {empty}")


@dataclass(frozen=True)
class ModalityProfile:
    """Per-class appearance of one imaging modality.

    The intensity transfer is sigmoid(gain * (v**gamma - offset)) rescaled
    to [0, 1], which is strictly monotone for gain > 0 and gamma > 0.
    """

    base_intensity: tuple[float, ...]
    gamma: float = 1.0
    gain: float = 5.0
    offset: float = 0.5
    bias_field_amplitude: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0 or self.gain <= 0:
            raise ValueError("gamma and gain must be positive")
        if self.bias_field_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("bias amplitude and noise sigma must be >= 0")
        if any(not 0.0 <= b <= 1.0 for b in self.base_intensity):
            raise ValueError("base intensities must lie in [0, 1]")

    def transfer(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        raw = _sigmoid(self.gain * (np.power(v, self.gamma) - self.offset))
        lo = _sigmoid(self.gain * (0.0 - self.offset))
        hi = _sigmoid(self.gain * (1.0 - self.offset))
        return (raw - lo) / (hi - lo)

    def to_dict(self) -> dict:
        return {
            "base_intensity": list(self.base_intensity),
            "gamma": self.gamma,
            "gain": self.gain,
            "offset": self.offset,
            "bias_field_amplitude": self.bias_field_amplitude,
            "noise_sigma": self.noise_sigma,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModalityProfile":
        return ModalityProfile(
            base_intensity=tuple(d["base_intensity"]),
            gamma=d["gamma"], gain=d["gain"], offset=d["offset"],
            bias_field_amplitude=d["bias_field_amplitude"],
            noise_sigma=d["noise_sigma"],
        )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def default_profiles(num_classes: int = 5) -> tuple[ModalityProfile, ModalityProfile]:
    """Two modality appearances with scrambled per-class intensity order.

    The A-to-B intensity correspondence is deliberately non-monotone, so a
    model trained on one modality cannot map to the other with a global
    intensity transform.
    """
    if num_classes != 5:
        raise ValueError("default profiles are defined for 5 classes")
    profile_a = ModalityProfile(
        base_intensity=(0.08, 0.85, 0.35, 0.62, 0.47),
        gamma=0.8, gain=6.0, offset=0.50,
        bias_field_amplitude=0.06, noise_sigma=0.03,
    )
    profile_b = ModalityProfile(
        base_intensity=(0.28, 0.837, 0.65, 0.70, 0.578),
        gamma=1.4, gain=5.0, offset=0.45,
        bias_field_amplitude=0.10, noise_sigma=0.04,
    )
    return profile_a, profile_b


def profiles_differ_in_ordering(a: ModalityProfile, b: ModalityProfile) -> bool:
    """True if at least one class pair swaps its intensity order between
    the two profiles (guarantees a nonlinear cross-modal mapping)."""
    ints_a, ints_b = a.base_intensity, b.base_intensity
    n = min(len(ints_a), len(ints_b))
    for i in range(n):
        for j in range(i + 1, n):
            if (ints_a[i] - ints_a[j]) * (ints_b[i] - ints_b[j]) < 0:
                return True
    return False


@dataclass
class LabeledSample:
    """A standardized image (H, W) float32 together with its label map."""

    image: np.ndarray
    label: LabelMap


@dataclass
class SeenLabelView:
    """Seen-class channels of a full label map.

    ``channels`` has shape (H, W, C_s) with one channel per seen structure;
    background and unseen-structure pixels are zero everywhere (unseen
    classes are implicitly background-like).  ``class_indices`` maps each
    channel to its index in the full C-channel label space.
    """

    channels: np.ndarray
    class_indices: tuple[int, ...]
    class_names: tuple[str, ...]

    @property
    def num_seen(self) -> int:
        return self.channels.shape[-1]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def generate_anatomy(seed: int, layout: LayoutConfig) -> LabelMap:
    """Draw one anatomy: paint the layout's structures in precedence order.

    Later structures overwrite earlier ones; a placement is rejected (and
    retried, up to ``layout.max_attempts`` times) if it would fully cover a
    previously painted structure.
    """
    rng = np.random.default_rng(seed)
    size = layout.size
    idx = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]

    for ci, tpl in enumerate(layout.structures, start=1):
        placed = False
        for _ in range(layout.max_attempts):
            mask = _sample_blob(rng, tpl, size, yy, xx)
            if not mask.any():
                continue
            trial = idx.copy()
            trial[mask] = ci
            # rejection: no earlier structure may vanish under this blob
            if all((trial == j).any() for j in range(1, ci)):
                idx = trial
                placed = True
                break
        if not placed:
            raise RuntimeError(
                f"could not place structure {tpl.name!r} after "
                f"{layout.max_attempts} attempts; layout infeasible")

    if not (idx == BACKGROUND).any():
        raise RuntimeError("layout infeasible: no background left")

    grid = np.eye(layout.num_classes, dtype=np.uint8)[idx]
    label = LabelMap(grid=grid, class_names=layout.class_names)
    label.validate()
    return label


def _sample_blob(rng: np.random.Generator, tpl: StructureTemplate,
                 size: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    y0, y1, x0, x1 = tpl.center_box
    cy = rng.uniform(y0, y1) * size
    cx = rng.uniform(x0, x1) * size
    ay = rng.uniform(*tpl.axis_y) * size
    ax = rng.uniform(*tpl.axis_x) * size
    theta = rng.uniform(-tpl.max_rotation, tpl.max_rotation)
    k = int(rng.choice(tpl.wobble_harmonics))
    phase = rng.uniform(0, 2 * np.pi)

    dy, dx = yy - cy, xx - cx
    ry = np.cos(theta) * dy - np.sin(theta) * dx
    rx = np.sin(theta) * dy + np.cos(theta) * dx
    u, v = rx / ax, ry / ay
    rad = np.hypot(u, v)
    ang = np.arctan2(v, u)
    boundary = 1.0 + tpl.wobble_amp * np.sin(k * ang + phase)
    return rad <= boundary


def render_modality(label: LabelMap, profile: ModalityProfile,
                    seed: int) -> np.ndarray:
    """Render an anatomy under one modality appearance.

    image = transfer(base_intensity[class]) + smooth bias field + Gaussian
    noise, clipped to [0, 1].  With zero noise and zero bias amplitude the
    image is piecewise constant, one level per class.
    """
    if len(profile.base_intensity) < label.num_classes:
        raise ValueError("profile does not cover all classes")
    rng = np.random.default_rng(seed)
    levels = profile.transfer(np.asarray(profile.base_intensity))
    img = levels[label.index_map]

    if profile.bias_field_amplitude > 0:
        img = img + profile.bias_field_amplitude * _bias_field(rng, img.shape)
    if profile.noise_sigma > 0:
        img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _bias_field(rng: np.random.Generator, shape: tuple[int, int],
                coarse: int = 4) -> np.ndarray:
    """Smooth random field in [-1, 1]: a spline-upsampled coarse grid."""
    grid = rng.normal(size=(coarse, coarse))
    zy, zx = shape[0] / coarse, shape[1] / coarse
    fld = ndimage.zoom(grid, (zy, zx), order=3, mode="nearest")
    fld = fld[: shape[0], : shape[1]]
    peak = np.abs(fld).max()
    return fld / peak if peak > 0 else fld


def normalize(image: np.ndarray) -> np.ndarray:
    """Standardize one image to zero mean and unit standard deviation."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite values")
    std = img.std()
    if std < 1e-12:
        raise ValueError("cannot normalize a constant image")
    return ((img - img.mean()) / std).astype(np.float32)


def flip_sample(sample: LabeledSample, axis: int) -> LabeledSample:
    """Mirror image and label along one spatial axis (0=vertical, 1=horizontal)."""
    image = np.flip(sample.image, axis=axis).copy()
    grid = np.flip(sample.label.grid, axis=axis).copy()
    return LabeledSample(image=image,
                         label=LabelMap(grid, sample.label.class_names))


def rotate_scale_sample(sample: LabeledSample, angle_deg: float,
                        scale: float) -> LabeledSample:
    """Rotate and scale image and label about the image center.

    The image is interpolated bilinearly; the label index map uses
    nearest-neighbor so the one-hot property is preserved exactly.  The
    identity transform (angle 0, scale 1) returns an exact copy.
    """
    if angle_deg == 0.0 and scale == 1.0:
        return LabeledSample(image=sample.image.copy(),
                             label=LabelMap(sample.label.grid.copy(),
                                            sample.label.class_names))
    h, w = sample.image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    # output -> input mapping: inverse of scale-then-rotate
    matrix = rot.T / scale
    offset = center - matrix @ center

    image = ndimage.affine_transform(
        sample.image.astype(np.float64), matrix, offset=offset,
        order=1, mode="nearest").astype(np.float32)
    idx = ndimage.affine_transform(
        sample.label.index_map, matrix, offset=offset, order=0,
        mode="nearest")
    grid = np.eye(sample.label.num_classes, dtype=np.uint8)[idx]
    return LabeledSample(image=image,
                         label=LabelMap(grid, sample.label.class_names))


def augment(sample: LabeledSample, seed: int,
            max_angle: float = 15.0,
            scale_range: tuple[float, float] = (0.9, 1.1)) -> LabeledSample:
    """Random flip + rotation + scaling, identical on image and label.

    The image is re-standardized afterwards since interpolation and edge
    handling perturb its statistics.
    """
    rng = np.random.default_rng(seed)
    out = sample
    if rng.random() < 0.5:
        out = flip_sample(out, axis=1)
    if rng.random() < 0.5:
        out = flip_sample(out, axis=0)
    angle = rng.uniform(-max_angle, max_angle)
    scale = rng.uniform(*scale_range)
    out = rotate_scale_sample(out, angle, scale)
    out.image = normalize(out.image)
    return out


# ---------------------------------------------------------------------------
# dataset bundle
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    """The three dataset roles of one experiment.

    ``prior_samples`` is the fully labeled modality-A set; ``mirror_samples``
    is the fully labeled modality-B set held out as evaluation ground truth.
    The partially labeled modality-B training view (seen classes only) is
    derived on demand via :meth:`seen_label`; it shares images with the
    mirror set, only the labels differ.
    """

    prior_samples: list[LabeledSample]
    mirror_samples: list[LabeledSample]
    unseen_classes: frozenset[int]
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    class_names: tuple[str, ...]
    layout: LayoutConfig
    profile_a: ModalityProfile
    profile_b: ModalityProfile
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def structure_classes(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_classes))

    @property
    def seen_classes(self) -> tuple[int, ...]:
        return tuple(c for c in self.structure_classes
                     if c not in self.unseen_classes)

    def seen_label(self, index: int) -> SeenLabelView:
        label = self.mirror_samples[index].label
        seen = self.seen_classes
        return SeenLabelView(
            channels=label.grid[..., list(seen)].copy(),
            class_indices=seen,
            class_names=tuple(self.class_names[c] for c in seen),
        )

    def train_samples(self) -> list[LabeledSample]:
        return [self.mirror_samples[i] for i in self.train_indices]

    def test_samples(self) -> list[LabeledSample]:
        return [self.mirror_samples[i] for i in self.test_indices]


def build_bundle(n_a: int, n_b: int, layout: LayoutConfig,
                 profile_a: ModalityProfile, profile_b: ModalityProfile,
                 unseen_classes, seed: int,
                 test_fraction: float = 0.2) -> DatasetBundle:
    """Generate a full two-modality dataset bundle.

    ``unseen_classes`` may be empty (fully supervised degenerate case) but
    must never cover all structures nor include the background.
    """
    unseen = frozenset(int(c) for c in unseen_classes)
    structures = set(range(1, layout.num_classes))
    if BACKGROUND in unseen:
        raise ValueError("background cannot be an unseen class")
    if not unseen <= structures:
        raise ValueError(f"unseen classes {sorted(unseen)} outside "
                         f"structure range {sorted(structures)}")
    if unseen == structures:
        raise ValueError("at least one structure must remain seen")
    if n_a < 5 or n_b < 5:
        raise ValueError("need at least 5 samples per modality")
    if not profiles_differ_in_ordering(profile_a, profile_b):
        raise ValueError("modality profiles must swap the intensity order "
                         "of at least one class pair")

    rng = np.random.default_rng(seed)

    def make(profile: ModalityProfile) -> LabeledSample:
        anatomy_seed = int(rng.integers(2**63))
        render_seed = int(rng.integers(2**63))
        label = generate_anatomy(anatomy_seed, layout)
        image = normalize(render_modality(label, profile, render_seed))
        return LabeledSample(image=image, label=label)

    prior_samples = [make(profile_a) for _ in range(n_a)]
    mirror_samples = [make(profile_b) for _ in range(n_b)]

    n_test = max(1, int(round(test_fraction * n_b)))
    perm = rng.permutation(n_b)
    test_idx = tuple(sorted(int(i) for i in perm[:n_test]))
    train_idx = tuple(sorted(int(i) for i in perm[n_test:]))

    return DatasetBundle(
        prior_samples=prior_samples,
        mirror_samples=mirror_samples,
        unseen_classes=unseen,
        train_indices=train_idx,
        test_indices=test_idx,
        class_names=layout.class_names,
        layout=layout,
        profile_a=profile_a,
        profile_b=profile_b,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + one .npz per sample
# ---------------------------------------------------------------------------

def save_bundle(bundle: DatasetBundle, directory: str | Path) -> Path:
    """Write a bundle as a manifest plus one array file per sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    files_a, files_b = [], []
    for i, s in enumerate(bundle.prior_samples):
        name = f"prior_{i:04d}.npz"
        np.savez(directory / name, image=s.image, label=s.label.grid)
        files_a.append(name)
    for i, s in enumerate(bundle.mirror_samples):
        name = f"mirror_{i:04d}.npz"
        np.savez(directory / name, image=s.image, label=s.label.grid,
                 seen_label=bundle.seen_label(i).channels)
        files_b.append(name)

    manifest = {
        "format": "protoseg-bundle-v1",
        "class_names": list(bundle.class_names),
        "unseen_classes": sorted(bundle.unseen_classes),
        "seen_classes": list(bundle.seen_classes),
        "train_indices": list(bundle.train_indices),
        "test_indices": list(bundle.test_indices),
        "seed": bundle.seed,
        "layout": bundle.layout.to_dict(),
        "profile_a": bundle.profile_a.to_dict(),
        "profile_b": bundle.profile_b.to_dict(),
        "prior_files": files_a,
        "mirror_files": files_b,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "protoseg-bundle-v1":
        raise ValueError("unrecognized bundle manifest format")
    class_names = tuple(manifest["class_names"])

    def load_samples(names):
        out = []
        for name in names:
            with np.load(directory / name) as data:
                out.append(LabeledSample(
                    image=data["image"],
                    label=LabelMap(data["label"], class_names)))
        return out

    return DatasetBundle(
        prior_samples=load_samples(manifest["prior_files"]),
        mirror_samples=load_samples(manifest["mirror_files"]),
        unseen_classes=frozenset(manifest["unseen_classes"]),
        train_indices=tuple(manifest["train_indices"]),
        test_indices=tuple(manifest["test_indices"]),
        class_names=class_names,
        layout=LayoutConfig.from_dict(manifest["layout"]),
        profile_a=ModalityProfile.from_dict(manifest["profile_a"]),
        profile_b=ModalityProfile.from_dict(manifest["profile_b"]),
        seed=manifest["seed"],
    )

"""Procedural paired-face data: identity-conditioned renderings, a
parametric makeup operator, fold splitting and the on-disk dataset layout.

Faces are composed of smooth analytic masks (ellipses in canonical [0,1]^2
coordinates) so renderings are deterministic, differentiable-looking and
cheap. A pair consists of a clean rendering (the ground truth) and a
second rendering of the same identity under slightly different nuisance
with the makeup operator applied (the probe). Makeup covers four effects:
lip tint, eye-region darkening, brow thickening and skin smoothing (plus a
foundation tone shift).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ppm
from .engine import Tensor

N_FOLDS = 5

# seed-stream salts so every consumer draws from an independent stream
_SALT_IDENTITY = 0x1D
_SALT_NUISANCE = 0x9E
_SALT_MAKEUP = 0x3A
_SALT_FOLDS = 0xF0


def _rng(*entropy):
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(e) for e in entropy]))


@dataclass
class SyntheticIdentity:
    """Geometry and coloring of one synthetic person, in canonical units."""

    id: int
    seed: int
    skin_tone: np.ndarray = None       # RGB in [-1,1]
    hair_tone: np.ndarray = None
    lip_tone: np.ndarray = None
    eye_tone: np.ndarray = None
    face_rx: float = 0.30
    face_ry: float = 0.40
    eye_spacing: float = 0.13          # half-distance between eye centers
    eye_y: float = -0.10
    eye_rx: float = 0.045
    eye_ry: float = 0.030
    brow_y: float = -0.175
    brow_ry: float = 0.012
    brow_rx: float = 0.075
    mouth_y: float = 0.22
    lip_rx: float = 0.10
    lip_ry: float = 0.040
    nose_len: float = 0.10

    @classmethod
    def sample(cls, ident, seed):
        rng = _rng(seed, _SALT_IDENTITY, ident)
        u = lambda lo, hi: float(rng.uniform(lo, hi))
        return cls(
            id=ident,
            seed=seed,
            skin_tone=np.array([u(0.25, 0.75), u(0.05, 0.45), u(-0.15, 0.25)], dtype=np.float32),
            hair_tone=np.array([u(-0.9, 0.3), u(-0.9, 0.1), u(-0.9, 0.0)], dtype=np.float32),
            lip_tone=np.array([u(0.1, 0.5), u(-0.5, -0.1), u(-0.5, -0.1)], dtype=np.float32),
            eye_tone=np.array([u(-0.9, -0.3), u(-0.9, -0.2), u(-0.7, 0.3)], dtype=np.float32),
            face_rx=u(0.26, 0.34),
            face_ry=u(0.36, 0.44),
            eye_spacing=u(0.10, 0.16),
            eye_y=u(-0.13, -0.07),
            eye_rx=u(0.035, 0.055),
            eye_ry=u(0.022, 0.038),
            brow_y=u(-0.20, -0.15),
            brow_ry=u(0.008, 0.016),
            brow_rx=u(0.06, 0.09),
            mouth_y=u(0.18, 0.26),
            lip_rx=u(0.07, 0.13),
            lip_ry=u(0.03, 0.05),
            nose_len=u(0.07, 0.13),
        )


@dataclass
class Nuisance:
    """Small uncontrolled-acquisition effects: jitter and occlusion."""

    dx: float = 0.0          # canonical units (1.0 = image width)
    dy: float = 0.0
    rot_deg: float = 0.0
    occlusion: tuple | None = None  # (cx, cy, half_w, half_h, gray)

    @classmethod
    def sample(cls, ident, seed, salt, size,
               max_shift_px=2.0, max_rot_deg=3.0, occlusion_prob=0.1):
        rng = _rng(seed, _SALT_NUISANCE, salt, ident)
        occ = None
        if rng.uniform() < occlusion_prob:
            occ = (
                float(rng.uniform(-0.3, 0.3)),
                float(rng.uniform(-0.3, 0.3)),
                float(rng.uniform(0.04, 0.10)),
                float(rng.uniform(0.04, 0.10)),
                float(rng.uniform(-0.6, 0.6)),
            )
        return cls(
            dx=float(rng.uniform(-max_shift_px, max_shift_px)) / size,
            dy=float(rng.uniform(-max_shift_px, max_shift_px)) / size,
            rot_deg=float(rng.uniform(-max_rot_deg, max_rot_deg)),
            occlusion=occ,
        )


@dataclass
class MakeupParams:
    """Strengths of the four cosmetic effects; all-zero is the identity map."""

    lip_tint: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    eye_darken: float = 0.0        # multiplicative pull toward black in the eye region
    brow_radius_px: float = 0.0    # dilation radius of the brow strokes
    skin_sigma_px: float = 0.0     # gaussian blur within the skin mask
    foundation: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))

    @classmethod
    def default(cls):
        return cls(
            lip_tint=np.array([0.45, -0.25, -0.10], dtype=np.float32),
            eye_darken=0.55,
            brow_radius_px=2.0,
            skin_sigma_px=1.6,
            foundation=np.array([0.16, 0.10, 0.06], dtype=np.float32),
        )

    @classmethod
    def sample(cls, ident, seed):
        """Per-identity makeup variation around the defaults."""
        rng = _rng(seed, _SALT_MAKEUP, ident)
        base = cls.default()
        jitter = lambda v, s: (np.asarray(v) * rng.uniform(1 - s, 1 + s)).astype(np.float32)
        return cls(
            lip_tint=jitter(base.lip_tint, 0.4),
            eye_darken=float(jitter(base.eye_darken, 0.4)),
            brow_radius_px=float(rng.uniform(1.0, 3.0)),
            skin_sigma_px=float(rng.uniform(1.0, 2.2)),
            foundation=jitter(base.foundation, 0.5),
        )


@dataclass
class RegionMasks:
    """Soft cosmetic-region masks; tails below 1e-3 are truncated to exact 0
    so the makeup operator is provably local."""

    lips: np.ndarray
    eyes: np.ndarray          # eye surround (shadow region)
    brows: np.ndarray
    skin: np.ndarray          # face skin minus the other regions


@dataclass
class ImagePair:
    I_A: Tensor               # makeup probe
    I_B: Tensor               # clean ground truth
    y: int
    nuisance_A: Nuisance = None
    nuisance_B: Nuisance = None


def _soft(d, softness=0.035):
    """Smooth inside-mask from a normalized quadratic distance (1 = boundary)."""
    m = 1.0 / (1.0 + np.exp(np.clip((d - 1.0) / softness, -60, 60)))
    m[m < 1e-3] = 0.0
    return m.astype(np.float32)


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2


def _paint(img, mask, color):
    img *= 1.0 - mask[None]
    img += mask[None] * np.asarray(color, dtype=np.float32)[:, None, None]


def render_regions(identity: SyntheticIdentity, nuisance: Nuisance, size):
    """Render a clean face and its cosmetic-region masks.

    Nuisance is applied by evaluating all masks in jittered/rotated
    coordinates, so no resampling artifacts enter the image.
    """
    h, w = size
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h - 0.5
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w - 0.5
    yy0, xx0 = np.meshgrid(ys, xs, indexing="ij")
    th = np.deg2rad(nuisance.rot_deg)
    ct, st = np.cos(th), np.sin(th)
    xx = ct * (xx0 - nuisance.dx) - st * (yy0 - nuisance.dy)
    yy = st * (xx0 - nuisance.dx) + ct * (yy0 - nuisance.dy)

    ident = identity
    face = _soft(_ellipse(xx, yy, 0.0, 0.02, ident.face_rx, ident.face_ry))
    hair = _soft(_ellipse(xx, yy, 0.0, -0.05, ident.face_rx * 1.25, ident.face_ry * 1.18))
    eye_l = _ellipse(xx, yy, -ident.eye_spacing, ident.eye_y, ident.eye_rx, ident.eye_ry)
    eye_r = _ellipse(xx, yy, ident.eye_spacing, ident.eye_y, ident.eye_rx, ident.eye_ry)
    eyes = np.maximum(_soft(eye_l), _soft(eye_r))
    eye_surround = np.maximum(
        _soft(_ellipse(xx, yy, -ident.eye_spacing, ident.eye_y, ident.eye_rx * 2.0, ident.eye_ry * 2.6)),
        _soft(_ellipse(xx, yy, ident.eye_spacing, ident.eye_y, ident.eye_rx * 2.0, ident.eye_ry * 2.6)),
    )
    brows = np.maximum(
        _soft(_ellipse(xx, yy, -ident.eye_spacing, ident.brow_y, ident.brow_rx, ident.brow_ry)),
        _soft(_ellipse(xx, yy, ident.eye_spacing, ident.brow_y, ident.brow_rx, ident.brow_ry)),
    )
    nose = _soft(_ellipse(xx, yy, 0.0, 0.06, 0.022, ident.nose_len))
    lips = _soft(_ellipse(xx, yy, 0.0, ident.mouth_y, ident.lip_rx, ident.lip_ry))

    img = np.empty((3, h, w), dtype=np.float32)
    img[:] = np.array([-0.55, -0.55, -0.5], dtype=np.float32)[:, None, None]  # backdrop
    _paint(img, hair, ident.hair_tone)
    _paint(img, face, ident.skin_tone)
    _paint(img, nose, ident.skin_tone * 0.75)
    _paint(img, brows, ident.hair_tone * 0.8)
    _paint(img, eyes, ident.eye_tone)
    _paint(img, lips, ident.lip_tone)

    if nuisance.occlusion is not None:
        cx, cy, hw_, hh_, gray = nuisance.occlusion
        box = ((np.abs(xx0 - cx) <= hw_) & (np.abs(yy0 - cy) <= hh_))
        img[:, box] = gray

    np.clip(img, -1.0, 1.0, out=img)

    # regions are made disjoint by removing the *support* of higher-priority
    # masks, so pairwise products are exactly zero
    eye_region = (eye_surround * (brows == 0) * (lips == 0)).astype(np.float32)
    features = (eyes > 0) | (eye_region > 0) | (brows > 0) | (lips > 0) | (nose > 0)
    skin = (face * ~features).astype(np.float32)
    skin[skin < 1e-3] = 0.0
    masks = RegionMasks(lips=lips, eyes=eye_region, brows=brows, skin=skin)
    return img, masks


def render_identity(identity: SyntheticIdentity, nuisance: Nuisance, size):
    """Deterministic clean rendering as a (3,h,w) Tensor in [-1,1]."""
    img, _ = render_regions(identity, nuisance, size)
    return Tensor(img)


def apply_makeup(image, masks: RegionMasks, params: MakeupParams):
    """Apply the cosmetic operator; all-zero params return the input unchanged.

    Effects touch only their region masks (the brow effect touches the brow
    mask dilated by its radius), and the output is clamped to [-1,1].
    """
    img = (image.data if isinstance(image, Tensor) else np.asarray(image)).copy()

    if np.any(params.lip_tint != 0):
        img += masks.lips[None] * params.lip_tint[:, None, None]

    if params.eye_darken != 0:
        # pull values toward black (-1) inside the eye surround
        img -= params.eye_darken * masks.eyes[None] * (img + 1.0)

    if params.brow_radius_px > 0:
        r = int(np.ceil(params.brow_radius_px))
        dilated = ndimage.grey_dilation(masks.brows, size=(2 * r + 1, 2 * r + 1))
        img -= 0.6 * dilated[None] * (img + 1.0)

    if params.skin_sigma_px > 0:
        blurred = np.stack(
            [ndimage.gaussian_filter(c, sigma=params.skin_sigma_px) for c in img]
        )
        blend = masks.skin[None]
        img = img * (1.0 - blend) + blurred * blend

    if np.any(params.foundation != 0):
        img += masks.skin[None] * params.foundation[:, None, None]

    out = np.clip(img, -1.0, 1.0).astype(np.float32)
    return Tensor(out) if isinstance(image, Tensor) else out


def makeup_footprint(masks: RegionMasks, params: MakeupParams):
    """Boolean map of pixels the operator may touch for these params."""
    touched = (masks.lips > 0) | (masks.eyes > 0) | (masks.skin > 0)
    if params.brow_radius_px > 0:
        r = int(np.ceil(params.brow_radius_px))
        touched |= ndimage.grey_dilation(masks.brows, size=(2 * r + 1, 2 * r + 1)) > 0
    else:
        touched |= masks.brows > 0
    return touched


@dataclass
class FoldSplit:
    """Identity -> fold assignment; identities never straddle folds."""

    assignments: dict
    n_folds: int = N_FOLDS

    @classmethod
    def build(cls, ids, seed, n_folds=N_FOLDS):
        ids = list(ids)
        order = _rng(seed, _SALT_FOLDS).permutation(len(ids))
        return cls({ids[j]: int(i % n_folds) for i, j in enumerate(order)}, n_folds)

    def fold_of(self, ident):
        return self.assignments[ident]

    def test_ids(self, fold):
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold):
        return sorted(i for i, f in self.assignments.items() if f != fold)


def make_dataset(n_identities, seed, size=(64, 64)):
    """One aligned (makeup, clean) pair per identity plus the fold split."""
    if n_identities < N_FOLDS:
        raise ValueError(f"need at least {N_FOLDS} identities, got {n_identities}")
    pairs = []
    for ident in range(n_identities):
        identity = SyntheticIdentity.sample(ident, seed)
        nuis_b = Nuisance.sample(ident, seed, salt=0, size=size[0])
        nuis_a = Nuisance.sample(ident, seed, salt=1, size=size[0])
        clean_b = render_identity(identity, nuis_b, size)
        clean_a, masks_a = render_regions(identity, nuis_a, size)
        makeup = apply_makeup(clean_a, masks_a, MakeupParams.sample(ident, seed))
        pairs.append(ImagePair(I_A=Tensor(makeup), I_B=clean_b, y=ident,
                               nuisance_A=nuis_a, nuisance_B=nuis_b))
    return pairs, FoldSplit.build(range(n_identities), seed)


def render_variations(n_identities, per_identity, seed, size=(64, 64), salt_base=100):
    """Clean renderings with varied nuisance, for extractor pretraining."""
    images, labels = [], []
    for ident in range(n_identities):
        identity = SyntheticIdentity.sample(ident, seed)
        for v in range(per_identity):
            nuis = Nuisance.sample(ident, seed, salt=salt_base + v, size=size[0])
            images.append(render_identity(identity, nuis, size).data)
            labels.append(ident)
    return np.stack(images), np.asarray(labels)


def mirror_augment(pair: ImagePair):
    """Left-right flip of both images; identity label preserved."""
    return replace(
        pair,
        I_A=Tensor(pair.I_A.data[:, :, ::-1].copy()),
        I_B=Tensor(pair.I_B.data[:, :, ::-1].copy()),
    )


# -- on-disk layout: pairs/<id>_A.ppm, pairs/<id>_B.ppm, folds.csv, manifest.csv

from . import ppm  # noqa: E402  (local import keeps the IO dependency explicit)


def save_dataset(root, pairs, folds: FoldSplit, seed, size):
    root = Path(root)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        ppm.write_image(root / "pairs" / f"{pair.y:05d}_A.ppm", pair.I_A)
        ppm.write_image(root / "pairs" / f"{pair.y:05d}_B.ppm", pair.I_B)
    with open(root / "folds.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "fold"])
        for ident in sorted(folds.assignments):
            writer.writerow([ident, folds.assignments[ident]])
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerow(["seed", seed])
        writer.writerow(["size", size[0]])
        writer.writerow(["n_identities", len(pairs)])
        writer.writerow(["n_folds", folds.n_folds])


def load_dataset(root):
    root = Path(root)
    manifest = {}
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            manifest[row["key"]] = row["value"]
    assignments = {}
    with open(root / "folds.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            assignments[int(row["id"])] = int(row["fold"])
    folds = FoldSplit(assignments, int(manifest.get("n_folds", N_FOLDS)))
    pairs = []
    for ident in sorted(assignments):
        i_a = ppm.read_image(root / "pairs" / f"{ident:05d}_A.ppm")
        i_b = ppm.read_image(root / "pairs" / f"{ident:05d}_B.ppm")
        pairs.append(ImagePair(I_A=Tensor(i_a), I_B=Tensor(i_b), y=ident))
    return pairs, folds, manifest

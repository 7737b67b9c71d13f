"""Synthetic phantom generation, preprocessing, pairing, and dataset layout.

The phantom mimics a short-axis cardiac slab: a two-layer ellipsoid (blood
pool inside a myocardium shell) plus a separate lateral lobe, four classes
in total. The second phase is produced by an analytic radial map about each
structure (inner boundary pulled inward, lobe contracted), so images, masks
and the dense correspondence field are all exact by construction: the ED
phase is the analytic template and the ES phase samples the same template
through the map. Both cardiac phases are generated, and each subject yields
two directed registration pairs.

On-disk layout: ``<root>/<subject>/{ed,es}_img.nii.gz``,
``{ed,es}_seg.nii.gz``, ground-truth fields, and a ``manifest.json`` with
subjects, split assignment, and class names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .errors import ContractError, DataError
from .fieldops import (
    DisplacementField,
    GridShape,
    ImageVolume,
    LabelVolume,
    _sample_at,
    identity_grid_tensor,
)

CLASS_NAMES = ("background", "RV", "LVM", "LVBP")
NUM_CLASSES = len(CLASS_NAMES)
DIRECTIONS = ("ed_to_es", "es_to_ed")

FULL_SCALE_SHAPE = (128, 128, 16)
FULL_SCALE_SPACING = (1.8, 1.8, 10.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic cohort."""

    shape: tuple[int, int, int] = (32, 32, 8)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subjects: int = 50
    d_max: float = 1.9  # max displacement magnitude, voxels
    lvbp_frac: float = 0.55  # blood-pool boundary as a fraction of the shell
    noise_sigma: float = 0.032
    edge_width: float = 0.24  # intensity transition width, normalized radius
    texture: float = 0.06  # peak amplitude of smooth intra-region texture
    intensities: tuple[float, float, float, float] = (0.15, 0.5, 0.7, 0.95)
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if any(d < 8 for d in self.shape):
            raise ContractError(f"phantom grid dims must be >= 8, got {self.shape}")
        if not 0 <= self.d_max < min(self.shape) / 4:
            raise ContractError(
                f"d_max must satisfy 0 <= d_max < min(shape)/4 = {min(self.shape) / 4}"
            )
        if not 0.2 < self.lvbp_frac < 0.85:
            raise ContractError("lvbp_frac must keep the structures nested and disjoint")
        if self.subjects < 1:
            raise ContractError("need at least one subject")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")

    @property
    def noise_floor(self) -> float:
        """Expected MSE of two independently-noised copies of one image."""
        return 2.0 * self.noise_sigma**2

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.shape, spacing=self.spacing)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown phantom spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("shape", "spacing", "intensities", "split_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class RegistrationPair:
    """One directed registration problem."""

    pair_id: str
    subject_id: str
    direction: str
    moving_image: ImageVolume
    fixed_image: ImageVolume
    moving_seg: LabelVolume | None = None
    fixed_seg: LabelVolume | None = None
    gt_field: DisplacementField | None = None


# ---------------------------------------------------------------------------
# Analytic anatomy
# ---------------------------------------------------------------------------

def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _fade(rho, edge, width):
    """1 well inside `edge`, 0 well outside, smooth over `width`."""
    return _smoothstep((edge + width / 2.0 - rho) / width)


_SHELL_PEAK = 0.6495  # max of sin(2u) sin^2(u), attained at u = pi/3


@dataclass
class _RadialMap:
    """Analytic radial reparameterization about an ellipsoid center: the
    phase-2 point x maps to the template point c + (h(rho)/rho)(x - c) with
    h(rho) = rho + b(rho). Two C1 profiles:

    * ``contract``: b = delta sin^2(pi rho / support), nonnegative, so the
      whole structure shrinks in phase 2;
    * ``shell``: b = delta sin(2 pi rho / L) sin^2(pi rho / L) with
      L = support, positive inside L/2 and negative beyond, so an inner
      cavity contracts while the band around 2L/3 is pushed outward and a
      shell straddling L/2 thickens on both boundaries.

    `amplitude` bounds max |b|; h stays strictly increasing (checked), so
    the map is invertible by Newton iteration.
    """

    center: np.ndarray
    axes: np.ndarray
    amplitude: float  # max |h(rho) - rho|
    support: float
    profile: str = "contract"

    def __post_init__(self):
        if self.profile not in ("contract", "shell"):
            raise ContractError(f"unknown radial profile {self.profile!r}")
        if self.profile == "contract":
            self._delta = self.amplitude
            slope = self._delta * np.pi / self.support
        else:
            self._delta = self.amplitude / _SHELL_PEAK
            # max |d/drho sin(2 pi rho/L) sin^2(pi rho/L)| = 2 pi / L at rho = L/2
            slope = self._delta * 2.0 * np.pi / self.support
        if slope >= 0.95:
            raise ContractError("radial map amplitude too large to stay invertible")

    def rho(self, pts):
        return np.sqrt((((pts - self.center) / self.axes) ** 2).sum(axis=-1))

    def _bump(self, t):
        out = np.zeros_like(t)
        inside = t < self.support
        u = np.pi * t[inside] / self.support
        if self.profile == "contract":
            out[inside] = self._delta * np.sin(u) ** 2
        else:
            out[inside] = self._delta * np.sin(2.0 * u) * np.sin(u) ** 2
        return out

    def _dbump(self, t):
        out = np.zeros_like(t)
        inside = t < self.support
        u = np.pi * t[inside] / self.support
        k = np.pi / self.support
        if self.profile == "contract":
            out[inside] = self._delta * k * np.sin(2.0 * u)
        else:
            out[inside] = self._delta * k * (
                2.0 * np.cos(2.0 * u) * np.sin(u) ** 2 + np.sin(2.0 * u) ** 2
            )
        return out

    def forward(self, pts):
        rho = self.rho(pts)
        scale = np.ones_like(rho)
        nz = rho > 1e-12
        h = rho + self._bump(rho)
        scale[nz] = h[nz] / rho[nz]
        return self.center + scale[..., None] * (pts - self.center)

    def inverse(self, pts):
        rho = self.rho(pts)
        t = np.clip(rho - self._bump(rho), 0.0, None)
        for _ in range(80):
            f = t + self._bump(t) - rho
            t = np.clip(t - f / (1.0 + self._dbump(t)), 0.0, None)
        if float(np.abs(t + self._bump(t) - rho).max()) > 1e-9:
            raise DataError("radial map inversion failed to converge")
        scale = np.ones_like(rho)
        nz = rho > 1e-12
        scale[nz] = t[nz] / rho[nz]
        return self.center + scale[..., None] * (pts - self.center)


@dataclass
class _Anatomy:
    lv_map: _RadialMap
    rv_map: _RadialMap
    lvbp_frac: float
    levels: tuple
    shade: float
    edge_width: float
    amplitude: float
    # smooth pseudo-random texture: sum of sinusoids in template space,
    # rows of tex_freq are wave vectors (rad/voxel)
    tex_freq: np.ndarray | None = None
    tex_phase: np.ndarray | None = None
    tex_amp: np.ndarray | None = None

    def image(self, pts):
        rho_lv = self.lv_map.rho(pts)
        rho_rv = self.rv_map.rho(pts)
        bg, rv, lvm, lvbp = self.levels
        w = self.edge_width
        img = np.full(rho_lv.shape, bg)
        img += (lvm - bg) * _fade(rho_lv, 1.0, w)
        img += (lvbp - lvm) * _fade(rho_lv, self.lvbp_frac, w)
        img += (rv - bg) * _fade(rho_rv, 1.0, w)
        img += self.shade * np.exp(-(rho_lv**2))
        if self.tex_amp is not None:
            phases = pts @ self.tex_freq.T + self.tex_phase
            img += np.sin(phases) @ self.tex_amp
        return img

    def labels(self, pts):
        rho_lv = self.lv_map.rho(pts)
        rho_rv = self.rv_map.rho(pts)
        out = np.zeros(rho_lv.shape, dtype=np.int16)
        out[rho_rv < 1.0] = 1
        out[rho_lv < 1.0] = 2
        out[rho_lv < self.lvbp_frac] = 3
        return out

    def phase2_points(self, pts):
        return self.lv_map.forward(self.rv_map.forward(pts))

    def phase2_inverse_points(self, pts):
        return self.rv_map.inverse(self.lv_map.inverse(pts))


def _sample_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> _Anatomy:
    h, w, d = spec.shape
    jit = lambda s: rng.uniform(-s, s)
    lv_center = np.array([0.63 * h + jit(0.5), 0.50 * w + jit(0.75), 0.50 * d + jit(0.25)])
    lv_axes = np.array([0.26 * h, 0.26 * w, 0.38 * d]) * rng.uniform(0.94, 1.06, 3)
    rv_center = np.array([0.175 * h + jit(0.5), 0.47 * w + jit(0.75), 0.50 * d + jit(0.25)])
    rv_axes = np.array([0.115 * h, 0.17 * w, 0.40 * d]) * rng.uniform(0.92, 1.08, 3)

    amplitude = spec.d_max * rng.uniform(0.75, 1.0)
    # shell profile with L = 1.5: pull peaks at rho = 0.5 (inside the blood
    # pool boundary) and push peaks at rho = 1.0 (the outer shell boundary),
    # so the pool shrinks and the shell thickens on both sides. The lobe
    # contracts as a whole, its bump peaking right at the lobe boundary.
    # Per-map shares may sum past 1 because the two displacement peaks are
    # spatially separated; the generator still asserts the composed field
    # stays within d_max. Normalized amplitudes clamp to the invertibility
    # bound, which only binds when structures are small relative to d_max.
    lv_amp = min(
        0.72 * amplitude / lv_axes.max(),
        0.85 * _SHELL_PEAK * 1.5 / (2.0 * np.pi),
    )
    rv_amp = min(0.52 * amplitude / rv_axes.max(), 0.85 * 2.0 / np.pi)
    lv_map = _RadialMap(lv_center, lv_axes, amplitude=lv_amp, support=1.5, profile="shell")
    rv_map = _RadialMap(rv_center, rv_axes, amplitude=rv_amp, support=2.0, profile="contract")

    base = np.array(spec.intensities)
    levels = tuple(base + rng.uniform(-0.02, 0.02, 4))

    tex_freq = tex_phase = tex_amp = None
    if spec.texture > 0:
        n_waves = 4
        wavelengths = rng.uniform(5.5, 9.0, n_waves)  # voxels
        dirs = rng.normal(size=(n_waves, 3))
        dirs[:, 2] *= 0.5  # mostly in-plane, like myocardial texture
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        tex_freq = dirs * (2.0 * np.pi / wavelengths)[:, None]
        tex_phase = rng.uniform(0, 2 * np.pi, n_waves)
        tex_amp = rng.dirichlet(np.ones(n_waves)) * spec.texture

    return _Anatomy(
        lv_map=lv_map,
        rv_map=rv_map,
        lvbp_frac=spec.lvbp_frac * rng.uniform(0.95, 1.05),
        levels=levels,
        shade=0.04,
        edge_width=spec.edge_width,
        amplitude=amplitude,
        tex_freq=tex_freq,
        tex_phase=tex_phase,
        tex_amp=tex_amp,
    )


@dataclass
class PhantomSubject:
    subject_id: str
    amplitude: float
    ed_image: ImageVolume
    es_image: ImageVolume
    ed_seg: LabelVolume
    es_seg: LabelVolume
    gt_ed_to_es: DisplacementField
    gt_es_to_ed: DisplacementField

    def pair(self, direction: str, with_masks=True, with_gt=True) -> RegistrationPair:
        if direction not in DIRECTIONS:
            raise ContractError(f"direction must be one of {DIRECTIONS}")
        fwd = direction == "ed_to_es"
        return RegistrationPair(
            pair_id=f"{self.subject_id}_{direction}",
            subject_id=self.subject_id,
            direction=direction,
            moving_image=self.ed_image if fwd else self.es_image,
            fixed_image=self.es_image if fwd else self.ed_image,
            moving_seg=(self.ed_seg if fwd else self.es_seg) if with_masks else None,
            fixed_seg=(self.es_seg if fwd else self.ed_seg) if with_masks else None,
            gt_field=(self.gt_ed_to_es if fwd else self.gt_es_to_ed) if with_gt else None,
        )


def generate_subject(spec: PhantomSpec, index: int) -> PhantomSubject:
    """Deterministically generate one subject's two phases and exact fields."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101, index]))
    anat = _sample_anatomy(spec, rng)

    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.shape], indexing="ij"),
        axis=-1,
    )
    ed_clean = anat.image(grid)
    ed_labels = anat.labels(grid)

    fwd_pts = anat.phase2_points(grid)  # phase-2 grid -> template points
    es_clean = anat.image(fwd_pts)
    es_labels = anat.labels(fwd_pts)
    u_ed_to_es = fwd_pts - grid

    inv_pts = anat.phase2_inverse_points(grid)
    u_es_to_ed = inv_pts - grid

    for u in (u_ed_to_es, u_es_to_ed):
        if np.abs(u).max() > spec.d_max + 1e-6:
            raise DataError("phantom displacement exceeded the configured d_max")
    for labels in (ed_labels, es_labels):
        if set(np.unique(labels)) != set(range(NUM_CLASSES)):
            raise DataError("phantom anatomy lost a class; adjust the spec geometry")
    if np.any((anat.lv_map.rho(grid) < 1.0) & (anat.rv_map.rho(grid) < 1.0)):
        raise DataError("phantom structures overlap; adjust the spec geometry")

    def noised(clean, phase):
        r = np.random.default_rng(np.random.SeedSequence([spec.seed, 202, index, phase]))
        out = clean + spec.noise_sigma * r.standard_normal(clean.shape)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    sid = f"subj_{index:03d}"
    return PhantomSubject(
        subject_id=sid,
        amplitude=anat.amplitude,
        ed_image=ImageVolume(data=noised(ed_clean, 0), spacing=spec.spacing),
        es_image=ImageVolume(data=noised(es_clean, 1), spacing=spec.spacing),
        ed_seg=LabelVolume(data=ed_labels, num_classes=NUM_CLASSES, spacing=spec.spacing),
        es_seg=LabelVolume(data=es_labels, num_classes=NUM_CLASSES, spacing=spec.spacing),
        gt_ed_to_es=DisplacementField(
            vectors=u_ed_to_es.astype(np.float32), spacing=spec.spacing
        ),
        gt_es_to_ed=DisplacementField(
            vectors=u_es_to_ed.astype(np.float32), spacing=spec.spacing
        ),
    )


def generate_phantom_pair(spec: PhantomSpec, seed: int, direction: str = "ed_to_es") -> RegistrationPair:
    """One directed pair from the subject indexed by `seed`."""
    return generate_subject(spec, seed).pair(direction)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def preprocess(vol: ImageVolume, target_spacing, target_shape) -> ImageVolume:
    """Trilinear resample to the target spacing, center crop / zero-pad to
    the target shape, then min-max normalize to [0, 1]."""
    target_spacing = tuple(float(s) for s in target_spacing)
    target_shape = tuple(int(n) for n in target_shape)
    data = vol.data.astype(np.float64)

    if tuple(vol.spacing) != target_spacing:
        ratios = [t / s for t, s in zip(target_spacing, vol.spacing)]
        out_dims = tuple(
            max(2, int(round(n * s / t)))
            for n, s, t in zip(data.shape, vol.spacing, target_spacing)
        )
        pos = identity_grid_tensor(out_dims, dtype=torch.float64)
        for a in range(3):
            pos[a] *= ratios[a]
        src = torch.from_numpy(data).unsqueeze(0).unsqueeze(0)
        data = _sample_at(src, pos.unsqueeze(0), "trilinear").squeeze().numpy()

    data = _center_crop_pad(data, target_shape)
    lo, hi = data.min(), data.max()
    if hi - lo <= 0:
        raise DataError("cannot min-max normalize a constant volume")
    data = (data - lo) / (hi - lo)
    return ImageVolume(data=data.astype(np.float32), spacing=target_spacing)


def _center_crop_pad(data: np.ndarray, target_shape):
    for axis, want in enumerate(target_shape):
        have = data.shape[axis]
        if have > want:
            start = (have - want) // 2
            data = np.take(data, range(start, start + want), axis=axis)
        elif have < want:
            before = (want - have) // 2
            pad = [(0, 0)] * data.ndim
            pad[axis] = (before, want - have - before)
            data = np.pad(data, pad)
    return data


# ---------------------------------------------------------------------------
# Cohort splitting
# ---------------------------------------------------------------------------

def split_cohort(subjects, ratios=(0.6, 0.2, 0.2), stratify_key=None, seed=0):
    """Subject-disjoint train/val/test split with exact largest-remainder
    counts. With `stratify_key` (subject -> scalar), subjects are binned by
    key quantile and the bins interleaved so each split covers the range."""
    subjects = list(subjects)
    n = len(subjects)
    if abs(sum(ratios) - 1.0) > 1e-6 or len(ratios) != 3:
        raise ContractError("ratios must be three values summing to 1")
    raw = [r * n for r in ratios]
    counts = [int(v) for v in raw]
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[order[i % 3]] += 1
    if min(counts) < 1:
        raise DataError(f"too few subjects ({n}) for split ratios {ratios}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    if stratify_key is None:
        seq = list(subjects)
        rng.shuffle(seq)
    else:
        ranked = sorted(subjects, key=lambda s: (stratify_key[s], s))
        n_bins = min(4, n)
        bins = [list(b) for b in np.array_split(ranked, n_bins)]
        for b in bins:
            rng.shuffle(b)
        seq = []
        for i in range(max(len(b) for b in bins)):
            for b in bins:
                if i < len(b):
                    seq.append(b[i])
    train = seq[: counts[0]]
    val = seq[counts[0] : counts[0] + counts[1]]
    test = seq[counts[0] + counts[1] :]
    return {"train": sorted(train), "val": sorted(val), "test": sorted(test)}


# ---------------------------------------------------------------------------
# On-disk datasets
# ---------------------------------------------------------------------------

def synth_dataset(spec: PhantomSpec, out_root) -> dict:
    """Generate the full cohort, write volumes and manifest, return manifest."""
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    amplitudes = {}
    for idx in range(spec.subjects):
        subj = generate_subject(spec, idx)
        amplitudes[subj.subject_id] = subj.amplitude
        sdir = root / subj.subject_id
        io.write_volume(subj.ed_image, sdir / "ed_img.nii.gz")
        io.write_volume(subj.es_image, sdir / "es_img.nii.gz")
        io.write_volume(subj.ed_seg, sdir / "ed_seg.nii.gz")
        io.write_volume(subj.es_seg, sdir / "es_seg.nii.gz")
        io.write_field(subj.gt_ed_to_es, sdir / "gt_ed_to_es.nii.gz")
        io.write_field(subj.gt_es_to_ed, sdir / "gt_es_to_ed.nii.gz")

    splits = split_cohort(
        sorted(amplitudes), ratios=spec.split_ratios, stratify_key=amplitudes, seed=spec.seed
    )
    by_subject = {s: split for split, subs in splits.items() for s in subs}
    manifest = {
        "format": "memwarp-phantom-v1",
        "seed": spec.seed,
        "shape": list(spec.shape),
        "spacing": list(spec.spacing),
        "d_max": spec.d_max,
        "noise_sigma": spec.noise_sigma,
        "num_classes": NUM_CLASSES,
        "class_names": list(CLASS_NAMES),
        "subjects": [
            {"id": s, "amplitude": amplitudes[s], "split": by_subject[s]}
            for s in sorted(amplitudes)
        ],
        "splits": splits,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json under {root}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "memwarp-phantom-v1":
        raise DataError(f"unrecognized dataset format in {path}")
    return manifest


def load_split_pairs(root, split: str, with_masks=True, with_gt=False):
    """Both directed pairs per subject of a split, in manifest order.
    Masks and fields are only read from disk when requested."""
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise DataError(f"unknown split {split!r}")
    root = Path(root)
    n_classes = manifest["num_classes"]
    pairs = []
    for sid in manifest["splits"][split]:
        sdir = root / sid
        ed_img = io.read_volume(sdir / "ed_img.nii.gz")
        es_img = io.read_volume(sdir / "es_img.nii.gz")
        ed_seg = es_seg = None
        if with_masks:
            ed_seg = io.read_volume(sdir / "ed_seg.nii.gz", num_classes=n_classes)
            es_seg = io.read_volume(sdir / "es_seg.nii.gz", num_classes=n_classes)
        for direction in DIRECTIONS:
            fwd = direction == "ed_to_es"
            gt = None
            if with_gt:
                gt = io.read_field(sdir / ("gt_ed_to_es.nii.gz" if fwd else "gt_es_to_ed.nii.gz"))
            pairs.append(
                RegistrationPair(
                    pair_id=f"{sid}_{direction}",
                    subject_id=sid,
                    direction=direction,
                    moving_image=ed_img if fwd else es_img,
                    fixed_image=es_img if fwd else ed_img,
                    moving_seg=(ed_seg if fwd else es_seg),
                    fixed_seg=(es_seg if fwd else ed_seg),
                    gt_field=gt,
                )
            )
    return pairs

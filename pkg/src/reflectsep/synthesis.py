"""Observed-image synthesis from (transmission, reflection) pairs.

Five mixing models turn a transmitted scene ``t`` and a reflected scene ``r``
into an observation ``y``::

    LINEAR       y = w t + (1 - w) r
    BLUR         y = w t + (1 - w) (k_b * r)
    GHOST        y = w t + (1 - w) (k_g * r) / max(k_g * r)
    CLIP         y = clip(t + k_b * r - m)
    CLIP_NOBLUR  y = clip(t + r - m)

where ``m`` is the mean overflow above 1 of ``t + r'``. The clipping form is a
fixed approximation of the generic clipping model; ``k_g`` is a two-pulse ghost
kernel. Parameters are redrawn for every pair.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging

W_RANGE = (0.5, 0.7)
SIGMA_RANGE = (2.0, 5.0)
GHOST_SHIFT_RANGE = (4, 16)
GHOST_ALPHA_RANGE = (0.4, 0.8)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class SynthModelKind(enum.Enum):
    LINEAR = "linear"
    BLUR = "blur"
    GHOST = "ghost"
    CLIP = "clip"
    CLIP_NOBLUR = "clip_noblur"

    @classmethod
    def parse(cls, text):
        """Parse ``"linear,blur"`` style lists (or ``"all"``) into a frozenset."""
        if isinstance(text, (set, frozenset, list, tuple)):
            return frozenset(k if isinstance(k, cls) else cls(str(k).lower()) for k in text)
        items = [s.strip().lower() for s in str(text).split(",") if s.strip()]
        if items == ["all"]:
            return frozenset(cls)
        try:
            return frozenset(cls(s) for s in items)
        except ValueError as exc:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown synthesis model in {text!r}; valid: {valid}") from exc


ALL_KINDS = frozenset(SynthModelKind)


def sorted_kinds(kinds):
    order = list(SynthModelKind)
    return sorted(kinds, key=order.index)


@dataclass(frozen=True)
class SynthParams:
    """Parameters for one synthesized observation.

    Every field is always populated; fields that the model ``kind`` does not use
    (e.g. ``sigma`` for LINEAR, the ghost fields for anything but GHOST) are
    carried along and ignored.
    """

    kind: SynthModelKind
    w: float
    sigma: float
    ghost_dx: int
    ghost_dy: int
    ghost_alpha: float


@dataclass
class TrainingPair:
    y: np.ndarray
    t: np.ndarray
    r: np.ndarray
    params: SynthParams | None = None
    t_file: str = ""
    r_file: str = ""


def sample_params(kind_set, rng):
    kinds = sorted_kinds(SynthModelKind.parse(kind_set))
    if not kinds:
        raise ValueError("kind_set must not be empty")
    kind = kinds[int(rng.integers(len(kinds)))]
    w = float(rng.uniform(*W_RANGE))
    sigma = float(rng.uniform(*SIGMA_RANGE))
    lo, hi = GHOST_SHIFT_RANGE
    dx = int(rng.integers(lo, hi + 1))
    dy = int(rng.integers(lo, hi + 1))
    alpha = float(rng.uniform(*GHOST_ALPHA_RANGE))
    return SynthParams(kind, w, sigma, dx, dy, alpha)


def ghost_kernel(p):
    """Two-pulse kernel: 1 at the origin, ``ghost_alpha`` at ``(ghost_dy, ghost_dx)``.

    The origin is the center element, as in :func:`imaging.conv2d_same`. Not
    normalized; the sum is ``1 + ghost_alpha``.
    """
    if p.kind is not SynthModelKind.GHOST:
        raise ValueError(f"ghost kernel requires GHOST params, got {p.kind.name}")
    radius = max(abs(p.ghost_dx), abs(p.ghost_dy))
    k = np.zeros((2 * radius + 1, 2 * radius + 1))
    k[radius, radius] = 1.0
    k[radius + p.ghost_dy, radius + p.ghost_dx] = p.ghost_alpha
    return k


def _pair(t, r):
    t = imaging.check_image(t, "t")
    r = imaging.check_image(r, "r")
    if t.shape != r.shape:
        raise ValueError(f"t and r shapes differ: {t.shape} vs {r.shape}")
    return t, r


def synth_linear(t, r, p):
    t, r = _pair(t, r)
    return p.w * t + (1.0 - p.w) * r


def synth_blur(t, r, p):
    t, r = _pair(t, r)
    blurred = imaging.conv2d_same(r, imaging.gaussian_kernel(p.sigma))
    return p.w * t + (1.0 - p.w) * blurred


def ghost_term(r, p):
    """Ghost-convolved reflection divided by its global maximum."""
    r = imaging.check_image(r, "r")
    g = imaging.conv2d_same(r, ghost_kernel(p))
    peak = float(g.max())
    if peak <= 0.0:
        raise ValueError("ghost model needs a reflection with positive intensity")
    return g / peak


def synth_ghost(t, r, p):
    t, r = _pair(t, r)
    return p.w * t + (1.0 - p.w) * ghost_term(r, p)


def synth_clip(t, r, p, with_blur):
    t, r = _pair(t, r)
    if with_blur:
        r = imaging.conv2d_same(r, imaging.gaussian_kernel(p.sigma))
    raw = t + r
    over = raw > 1.0
    m = float(np.mean(raw[over] - 1.0)) if over.any() else 0.0
    return imaging.clip01(raw - m)


def synthesize(t, r, p):
    """Dispatch on ``p.kind``; the single path used for every synthesized ``y``."""
    kind = p.kind
    if kind is SynthModelKind.LINEAR:
        return synth_linear(t, r, p)
    if kind is SynthModelKind.BLUR:
        return synth_blur(t, r, p)
    if kind is SynthModelKind.GHOST:
        return synth_ghost(t, r, p)
    if kind is SynthModelKind.CLIP:
        return synth_clip(t, r, p, with_blur=True)
    if kind is SynthModelKind.CLIP_NOBLUR:
        return synth_clip(t, r, p, with_blur=False)
    raise ValueError(f"unknown synthesis model {kind!r}")


@dataclass
class ImageSet:
    """A collection of images resized to 256x256, in a fixed order.

    Built from a directory (files scanned in lexicographic filename order) or
    from in-memory arrays. Decoded images are cached.
    """

    names: list[str]
    _paths: list[Path] | None = None
    _arrays: list[np.ndarray] | None = None
    _cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_dir(cls, directory):
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"image directory not found: {directory}")
        paths = sorted(
            (p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
            key=lambda p: p.name,
        )
        if not paths:
            raise ValueError(f"no PNG/JPEG images in {directory}")
        return cls(names=[p.name for p in paths], _paths=paths)

    @classmethod
    def from_files(cls, paths):
        paths = [Path(p) for p in paths]
        if not paths:
            raise ValueError("empty image list")
        return cls(names=[p.name for p in paths], _paths=paths)

    @classmethod
    def from_arrays(cls, images, prefix="img"):
        arrays = [imaging.check_image(im) for im in images]
        if not arrays:
            raise ValueError("empty image collection")
        return cls(names=[f"{prefix}{i:05d}" for i in range(len(arrays))], _arrays=arrays)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        if i not in self._cache:
            img = imaging.load_image(self._paths[i]) if self._paths else self._arrays[i]
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            self._cache[i] = imaging.resize_bilinear(img, imaging.BASE_SIZE, imaging.BASE_SIZE)
        return self._cache[i]

    def subset(self, indices):
        indices = list(indices)
        if self._paths is not None:
            return ImageSet(names=[self.names[i] for i in indices],
                            _paths=[self._paths[i] for i in indices])
        return ImageSet(names=[self.names[i] for i in indices],
                        _arrays=[self._arrays[i] for i in indices])


def augment(img256, rng, out_size=imaging.TRAIN_SIZE, flip=True):
    """Random crop + resize to ``out_size``, then (optionally) a random flip."""
    out = imaging.random_crop_resize(img256, rng, out_size=out_size)
    if flip:
        out = imaging.flip_lr(out, rng)
    return out


def build_batch(t_source, r_source, kinds, n, rng, out_size=imaging.TRAIN_SIZE,
                flip=True):
    """Draw ``n`` synthesized training pairs.

    For each pair: pick ``t`` and ``r`` uniformly and independently, augment
    each with its own crop/flip draws, sample fresh parameters, synthesize.
    """
    if len(t_source) == 0 or len(r_source) == 0:
        raise ValueError("image sources must not be empty")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    kinds = SynthModelKind.parse(kinds)
    pairs = []
    for _ in range(n):
        ti = int(rng.integers(len(t_source)))
        ri = int(rng.integers(len(r_source)))
        t = augment(t_source[ti], rng, out_size, flip)
        r = augment(r_source[ri], rng, out_size, flip)
        p = sample_params(kinds, rng)
        y = synthesize(t, r, p)
        pairs.append(TrainingPair(y, t, r, p, t_source.names[ti], r_source.names[ri]))
    return pairs


def stack_pairs(pairs):
    """Stack pairs into ``(y, t, r)`` arrays of shape (n, H, W, 3)."""
    return tuple(np.stack([getattr(p, f) for p in pairs]) for f in ("y", "t", "r"))


MANIFEST_COLUMNS = ("index", "kind", "w", "sigma", "ghost_dx", "ghost_dy",
                    "ghost_alpha", "t_file", "r_file")


def export_corpus(pairs, out_dir):
    """Write ``pairs/NNNNN_{y,t,r}.png`` and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    pair_dir = out_dir / "pairs"
    pair_dir.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for i, p in enumerate(pairs):
        for tag in ("y", "t", "r"):
            imaging.save_image(getattr(p, tag), pair_dir / f"{i:05d}_{tag}.png")
        q = p.params
        lines.append("\t".join([
            str(i), q.kind.value, repr(q.w), repr(q.sigma), str(q.ghost_dx),
            str(q.ghost_dy), repr(q.ghost_alpha), p.t_file, p.r_file,
        ]))
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path):
    rows = []
    text = Path(path).read_text().splitlines()
    header = text[0].split("\t")
    if tuple(header) != MANIFEST_COLUMNS:
        raise ValueError(f"unexpected manifest header {header}")
    for line in text[1:]:
        if not line:
            continue
        row = dict(zip(header, line.split("\t")))
        row["params"] = SynthParams(
            SynthModelKind(row["kind"]), float(row["w"]), float(row["sigma"]),
            int(row["ghost_dx"]), int(row["ghost_dy"]), float(row["ghost_alpha"]),
        )
        rows.append(row)
    return rows

"""PSNR/SSIM evaluation grids and qualitative panels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from PIL import ImageDraw

from . import imaging, networks, synthesis
from .synthesis import ImageSet, SynthModelKind

TARGETS = ("transmission", "reflection")
METRICS = ("PSNR", "SSIM")


def as_separator(model):
    """Wrap a model as ``f(images (N, H, W, 3)) -> dict of (N, H, W, C) arrays``.

    The model runs in eval mode (frozen batch-norm statistics) without
    gradients. Plain callables are returned unchanged.
    """
    if not isinstance(model, networks.SeparatorModel):
        return model
    dtype = next(model.parameters()).dtype

    def run(images):
        model.eval()
        with torch.no_grad():
            out = networks.separate(model, networks.images_to_tensor(images, dtype))
        return {k: (networks.tensor_to_images(v) if v.ndim == 4 else v.numpy())
                for k, v in out.items()}

    return run


@dataclass
class EvalGrid:
    """Per-(model kind, target, metric) lists of values, one per eval image.

    Infinite PSNR values are kept in the lists, excluded from mean/std and
    counted separately.
    """

    n_images: int
    cells: dict = field(default_factory=dict)

    def values(self, kind, target, metric):
        return self.cells[(kind, target, metric)]

    def stats(self, kind, target, metric):
        vals = np.asarray(self.values(kind, target, metric), dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        n_inf = int(len(vals) - len(finite))
        if len(finite) == 0:
            return math.inf, 0.0, n_inf
        return float(finite.mean()), float(finite.std()), n_inf

    @property
    def kinds(self):
        return synthesis.sorted_kinds({k for k, _, _ in self.cells})

    def rows(self):
        for kind in self.kinds:
            for target in TARGETS:
                yield kind, target

    def to_tsv(self):
        lines = ["kind\ttarget\tpsnr_mean\tpsnr_std\tpsnr_n_inf\tssim_mean\tssim_std\tn_images"]
        for kind, target in self.rows():
            pm, ps, pinf = self.stats(kind, target, "PSNR")
            sm, ss, _ = self.stats(kind, target, "SSIM")
            lines.append("\t".join([kind.value, target, _fmt(pm), _fmt(ps), str(pinf),
                                    _fmt(sm), _fmt(ss), str(self.n_images)]))
        return "\n".join(lines) + "\n"

    def to_table(self):
        header = ("model", "target", "PSNR (dB)", "SSIM")
        body = []
        footnote = False
        for kind, target in self.rows():
            pm, ps, pinf = self.stats(kind, target, "PSNR")
            sm, ss, _ = self.stats(kind, target, "SSIM")
            psnr_cell = "inf" if math.isinf(pm) else f"{pm:.2f} ± {ps:.2f}"
            if pinf and not math.isinf(pm):
                psnr_cell += f" [{pinf} inf]*"
                footnote = True
            body.append((kind.value, target, psnr_cell, f"{sm:.4f} ± {ss:.4f}"))
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
        fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
        lines = [fmt(header), fmt(tuple("-" * w for w in widths)), *map(fmt, body)]
        lines.append(f"n_images = {self.n_images} per cell")
        if footnote:
            lines.append("* infinite PSNR values excluded from mean/std")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "inf" if math.isinf(v) else repr(v)


def evaluate_pairs(separator, pairs, kind, grid, batch_size=8):
    """Score one model kind's pairs into ``grid`` (metrics via :mod:`imaging`)."""
    sep = as_separator(separator)
    for target in TARGETS:
        for metric in METRICS:
            grid.cells.setdefault((kind, target, metric), [])
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        out = sep(np.stack([p.y for p in chunk]))
        for p, t_hat, r_hat in zip(chunk, out["t_hat"], out["r_hat"]):
            for target, truth, est in (("transmission", p.t, t_hat), ("reflection", p.r, r_hat)):
                grid.cells[(kind, target, "PSNR")].append(imaging.psnr(truth, est))
                grid.cells[(kind, target, "SSIM")].append(imaging.ssim(truth, est))
    return grid


def held_out_pairs(t_source, r_source, kind, n, seed, image_size=imaging.TRAIN_SIZE):
    kind_index = list(SynthModelKind).index(kind)
    rng = np.random.default_rng([int(seed), kind_index])
    return synthesis.build_batch(t_source, r_source, {kind}, n, rng, out_size=image_size)


def evaluate(model, t_dir, r_dir, kinds, n, seed, image_size=None):
    """Synthesize ``n`` held-out pairs per model kind and score the separations.

    ``t_dir``/``r_dir`` may be directories or :class:`ImageSet` objects and
    should hold images never used for training.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    t_source = t_dir if isinstance(t_dir, ImageSet) else ImageSet.from_dir(t_dir)
    r_source = r_dir if isinstance(r_dir, ImageSet) else ImageSet.from_dir(r_dir)
    if image_size is None:
        image_size = getattr(model, "image_size", imaging.TRAIN_SIZE)
    grid = EvalGrid(n_images=n)
    for kind in synthesis.sorted_kinds(SynthModelKind.parse(kinds)):
        pairs = held_out_pairs(t_source, r_source, kind, n, seed, image_size)
        evaluate_pairs(model, pairs, kind, grid)
    return grid


def _tile(img, label, scale):
    img = imaging.clip01(img)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = img.shape[:2]
    tile = PILImage.fromarray(imaging.to_uint8(img)).resize((w * scale, h * scale),
                                                           PILImage.NEAREST)
    canvas = PILImage.new("RGB", (w * scale, h * scale + 14), (255, 255, 255))
    canvas.paste(tile, (0, 14))
    ImageDraw.Draw(canvas).text((2, 1), label, fill=(0, 0, 0))
    return canvas


def dump_panels(model, pairs, out_dir, scale=1):
    """Write ``panel_NNNNN.png`` per pair: input, estimates, mask tiles (MASK), ground truth."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create panel directory {out_dir}: {exc}") from exc
    sep = as_separator(model)
    paths = []
    for i, p in enumerate(pairs):
        out = sep(p.y[None])
        tiles = [("y", p.y), ("G_t(y)", out["t_hat"][0]), ("G_r(y)", out["r_hat"][0])]
        if "mask" in out:
            tiles += [("G_m(y)", out["mask"][0]), ("G_mt(y)", out["g_mt"][0]),
                      ("G_mr(y)", out["g_mr"][0])]
        if p.t is not None:
            tiles.append(("t", p.t))
        if p.r is not None:
            tiles.append(("r", p.r))
        images = [_tile(img, label, scale) for label, img in tiles]
        width = sum(im.width for im in images) + 2 * (len(images) - 1)
        panel = PILImage.new("RGB", (width, images[0].height), (255, 255, 255))
        x = 0
        for im in images:
            panel.paste(im, (x, 0))
            x += im.width + 2
        path = out_dir / f"panel_{i:05d}.png"
        try:
            panel.save(path)
        except OSError as exc:
            raise OSError(f"cannot write panel {path}: {exc}") from exc
        paths.append(path)
    return paths

"""Deterministic synthetic corpus of blade-like images for desk-scale runs.

Each image holds a solid bar (the "blade") spanning the image along its
group's orientation, drawn in a blade color band over a jittered background
band. Probability maps start as the exact 0/1 ground truth and are then
corrupted to give each pipeline stage something specific to repair: enclosed
holes inside the bar (recovered by hole filling) and salt noise (cleaned up
by the color forest). The color bands are disjoint in every channel, so a
shallow forest can separate them.

All randomness derives from per-image seeds ``[seed, group, image]``, so a
spec generates the identical corpus bit for bit regardless of generation
order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .manifest import Manifest, ManifestRow, save_manifest
from .raster import (
    FORMAT_BPR_FLOAT,
    FORMAT_PGM_MASK,
    FORMAT_PPM,
    PROBABILITY,
    BinaryMask,
    FlipTransform,
    FloatRaster,
    RgbImage,
    apply_flip,
    store_raster,
)

__all__ = ["ColorBand", "CorpusSpec", "generate_corpus"]

# (low, high) inclusive per channel.
ColorBand = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]

DEFAULT_BLADE_BAND: ColorBand = ((200, 235), (200, 235), (200, 235))
DEFAULT_BACKGROUND_BAND: ColorBand = ((30, 90), (60, 120), (30, 90))

HOLE_PROBABILITY = 0.05
SALT_FG_PROBABILITY = 0.95
SALT_BG_PROBABILITY = 0.05


@dataclass(frozen=True)
class CorpusSpec:
    """Corpus shape, color bands and corruption levels.

    ``logit_margin`` of None keeps the probability maps at exactly 0 and 1;
    a positive value softens them to sigmoid(+/-margin) without any spatial
    blurring. Holes are always placed strictly inside the bar so they stay
    enclosed after quantization.
    """

    groups: int = 2
    images_per_group: int = 10
    size: int = 128
    hole_count: int = 2
    hole_size: tuple[int, int] = (3, 8)
    salt_rate: float = 0.01
    seed: int = 7
    bar_width: tuple[int, int] = (16, 40)
    blade_band: ColorBand = DEFAULT_BLADE_BAND
    background_band: ColorBand = DEFAULT_BACKGROUND_BAND
    logit_margin: float | None = None
    orientations: tuple[str, ...] | None = None  # per group; default alternates

    def __post_init__(self) -> None:
        if self.groups < 1 or self.images_per_group < 1:
            raise ValueError("need at least one group and one image per group")
        if self.size < 8:
            raise ValueError("image size must be >= 8")
        if self.hole_count < 0:
            raise ValueError("hole_count must be >= 0")
        if not (0.0 <= self.salt_rate < 1.0):
            raise ValueError("salt_rate must lie in [0, 1)")
        lo, hi = self.hole_size
        if lo < 1 or hi < lo:
            raise ValueError(f"bad hole size range {self.hole_size}")
        blo, bhi = self.bar_width
        if blo < 3 or bhi < blo:
            raise ValueError(f"bad bar width range {self.bar_width}")
        if self.hole_count > 0 and hi + 2 > blo:
            raise ValueError(
                f"holes up to {hi} px do not fit strictly inside bars as narrow "
                f"as {blo} px"
            )
        if self.hole_count > 0 and hi + 2 > self.size:
            raise ValueError(f"holes up to {hi} px do not fit inside {self.size} px images")
        if bhi > self.size - 4:
            raise ValueError(f"bars up to {bhi} px do not fit in {self.size} px images")
        for name, band in (("blade", self.blade_band), ("background", self.background_band)):
            for c_lo, c_hi in band:
                if not (0 <= c_lo <= c_hi <= 255):
                    raise ValueError(f"bad {name} color band {band}")
        for (a_lo, a_hi), (b_lo, b_hi) in zip(self.blade_band, self.background_band):
            if not (a_hi < b_lo or b_hi < a_lo):
                raise ValueError("blade and background color bands must be disjoint per channel")
        if self.orientations is not None:
            if len(self.orientations) != self.groups:
                raise ValueError("orientations must list one entry per group")
            for o in self.orientations:
                if o not in ("vertical", "horizontal"):
                    raise ValueError(f"unknown orientation {o!r}")

    def orientation_for(self, group: int) -> str:
        if self.orientations is not None:
            return self.orientations[group]
        return "vertical" if group % 2 == 0 else "horizontal"


def _sample_band(rng: np.random.Generator, band: ColorBand, shape: tuple[int, int]) -> np.ndarray:
    channels = [
        rng.integers(lo, hi + 1, size=shape, dtype=np.int64) for lo, hi in band
    ]
    return np.stack(channels, axis=-1).astype(np.uint8)


def _make_image(
    spec: CorpusSpec, orientation: str, rng: np.random.Generator
) -> tuple[RgbImage, BinaryMask, FloatRaster]:
    n = spec.size
    width = int(rng.integers(spec.bar_width[0], spec.bar_width[1] + 1))
    start = int(rng.integers(2, n - width - 1))

    gt = np.zeros((n, n), dtype=bool)
    if orientation == "vertical":
        gt[:, start : start + width] = True
    else:
        gt[start : start + width, :] = True

    background = _sample_band(rng, spec.background_band, (n, n))
    blade = _sample_band(rng, spec.blade_band, (n, n))
    rgb = np.where(gt[:, :, None], blade, background)

    if spec.logit_margin is None:
        fg_p, bg_p = 1.0, 0.0
    else:
        fg_p, bg_p = float(expit(spec.logit_margin)), float(expit(-spec.logit_margin))
    prob = np.where(gt, fg_p, bg_p)

    hole_lo, hole_hi = spec.hole_size
    for _ in range(spec.hole_count):
        sh = int(rng.integers(hole_lo, hole_hi + 1))
        sw = int(rng.integers(hole_lo, hole_hi + 1))
        if orientation == "vertical":
            r0 = int(rng.integers(1, n - sh))
            c0 = int(rng.integers(start + 1, start + width - sw))
        else:
            r0 = int(rng.integers(start + 1, start + width - sh))
            c0 = int(rng.integers(1, n - sw))
        prob[r0 : r0 + sh, c0 : c0 + sw] = HOLE_PROBABILITY

    if spec.salt_rate > 0.0:
        salt = rng.random((n, n)) < spec.salt_rate
        prob = np.where(salt & gt, SALT_FG_PROBABILITY, prob)
        prob = np.where(salt & ~gt, SALT_BG_PROBABILITY, prob)

    return RgbImage(rgb), BinaryMask(gt), FloatRaster(prob, PROBABILITY)


def generate_corpus(spec: CorpusSpec, out_dir: str | Path) -> Manifest:
    """Write the corpus under ``out_dir`` and return its manifest.

    Layout: ``rgb/<blade>__<image>.ppm``, ``gt/<blade>__<image>.pgm``,
    ``prob/<blade>__<image>__<tag>.bpr`` for the four flip tags, plus
    ``manifest.csv`` at the top. The four probability variants are the flips
    of one corrupted map, mimicking a flip-consistent upstream network.
    """
    out = Path(out_dir)
    for sub in ("rgb", "gt", "prob"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rows = []
    for g in range(spec.groups):
        blade_id = f"blade{g:02d}"
        orientation = spec.orientation_for(g)
        for j in range(spec.images_per_group):
            image_id = f"img{j:02d}"
            rng = np.random.default_rng([spec.seed, g, j])
            rgb, gt, prob = _make_image(spec, orientation, rng)

            stem = f"{blade_id}__{image_id}"
            rgb_path = out / "rgb" / f"{stem}.ppm"
            gt_path = out / "gt" / f"{stem}.pgm"
            store_raster(rgb, rgb_path, FORMAT_PPM)
            store_raster(gt, gt_path, FORMAT_PGM_MASK)

            prob_paths = {}
            for t in FlipTransform:
                p = out / "prob" / f"{stem}__{t.value}.bpr"
                store_raster(apply_flip(prob, t), p, FORMAT_BPR_FLOAT)
                prob_paths[t] = p

            rows.append(
                ManifestRow(
                    blade_id=blade_id,
                    image_id=image_id,
                    rgb=rgb_path.resolve(),
                    prob_id=prob_paths[FlipTransform.IDENTITY].resolve(),
                    prob_fh=prob_paths[FlipTransform.FLIP_HORIZONTAL].resolve(),
                    prob_fv=prob_paths[FlipTransform.FLIP_VERTICAL].resolve(),
                    prob_fhv=prob_paths[FlipTransform.FLIP_BOTH].resolve(),
                    gt=gt_path.resolve(),
                )
            )

    manifest = Manifest(tuple(rows))
    save_manifest(manifest, out / "manifest.csv")
    return manifest

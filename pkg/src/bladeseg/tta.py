"""Soft voting over the four flip-variant probability maps.

Each prediction in a bundle lives in the frame of its own flip transform.
Since all four transforms are involutions, applying a prediction's own
transform maps it back to the original frame; the aligned maps are then
averaged with equal weight. Accumulation happens in float64 and in a fixed
canonical transform order, so the result is independent of entry order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .raster import (
    PROBABILITY,
    BinaryMask,
    FlipTransform,
    FloatRaster,
    RgbImage,
    apply_flip,
    quantize,
)

__all__ = ["TtaBundle", "expand_for_tta", "soft_vote", "tta_quantize"]

DEFAULT_THRESHOLD = 0.4


@dataclass(frozen=True)
class TtaBundle:
    """Exactly four (transform, probability raster) pairs, one per transform."""

    entries: tuple[tuple[FlipTransform, FloatRaster], ...]

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        if len(entries) != 4:
            raise ValueError(f"bundle needs exactly 4 entries, got {len(entries)}")
        tags = [t for t, _ in entries]
        if set(tags) != set(FlipTransform):
            raise ValueError("bundle must contain each flip transform exactly once")
        shapes = {p.shape for _, p in entries}
        if len(shapes) != 1:
            raise ValueError(f"bundle rasters disagree on shape: {sorted(shapes)}")
        for _, p in entries:
            if p.kind != PROBABILITY:
                raise ValueError("bundle rasters must be probability rasters")
        object.__setattr__(self, "entries", entries)

    def raster_for(self, transform: FlipTransform) -> FloatRaster:
        for tag, p in self.entries:
            if tag is transform:
                return p
        raise KeyError(transform)


def expand_for_tta(img: RgbImage) -> list[tuple[FlipTransform, RgbImage]]:
    """The four tagged flip variants of an image, identity entry first."""
    return [(t, apply_flip(img, t)) for t in FlipTransform]


def soft_vote(bundle: TtaBundle) -> FloatRaster:
    """Align each prediction back to the original frame and average them.

    Summation order is the canonical transform order regardless of how the
    bundle was assembled, so reordering entries cannot change the output.
    """
    aligned = [
        apply_flip(bundle.raster_for(t), t).values for t in FlipTransform
    ]
    # Pairwise sum, then an exact *0.25: four equal inputs reproduce their
    # common value bit for bit, and the result never leaves [0, 1].
    mean = ((aligned[0] + aligned[1]) + (aligned[2] + aligned[3])) * 0.25
    return FloatRaster(mean, PROBABILITY)


def tta_quantize(bundle: TtaBundle, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Soft-vote the bundle, then binarize at ``threshold``."""
    return quantize(soft_vote(bundle), threshold)

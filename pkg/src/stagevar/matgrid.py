"""Grid-shaped matrix primitives: feature maps, bilinear resampling, 2-D spectra.

A feature map is an M x d real matrix whose rows are tokens laid out on an
(h, w) grid in row-major order, M = h * w.  Resampling is separable bilinear
interpolation with corner alignment: output endpoints sample input endpoints
exactly, and a 1-pixel source dimension is treated as constant along that
axis.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["FeatureMap", "SpectrumSplit", "upsample", "downsample", "spectrum_split"]


@dataclass(frozen=True)
class FeatureMap:
    """M x d token-by-channel matrix carrying its (h, w) grid shape."""

    data: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "grid", (int(self.grid[0]), int(self.grid[1])))
        h, w = self.grid
        if h < 1 or w < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.grid}")
        if data.ndim != 2:
            raise ValueError(f"data must be 2-D (tokens x channels), got shape {data.shape}")
        if data.shape[0] != h * w:
            raise ValueError(f"token count {data.shape[0]} does not match h*w = {h * w}")
        if data.shape[1] < 1:
            raise ValueError("channel width must be positive")
        if not np.isfinite(data).all():
            raise ValueError("feature map contains non-finite entries")

    @property
    def h(self) -> int:
        return self.grid[0]

    @property
    def w(self) -> int:
        return self.grid[1]

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def as_grid(self) -> np.ndarray:
        """View the tokens as an (h, w, d) array."""
        return self.data.reshape(self.h, self.w, self.d)


@dataclass(frozen=True)
class SpectrumSplit:
    """Spectral energy below / at-or-above a radial cutoff, summed over channels."""

    low_energy: float
    high_energy: float
    cutoff_fraction: float

    @property
    def total(self) -> float:
        return self.low_energy + self.high_energy


def _axis_samples(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned sample positions: lower index, upper index, fraction.

    Positions are j*(src-1)/(dst-1).  src == 1 is constant along the axis;
    dst == 1 samples the axis midpoint.  The integer product is formed
    before the division so endpoints land on exact integers.
    """
    if src == 1:
        zeros = np.zeros(dst, dtype=np.intp)
        return zeros, zeros, np.zeros(dst)
    if dst == 1:
        pos = np.array([(src - 1) / 2])
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(pos.astype(np.intp), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def _resample_axis(block: np.ndarray, dst: int) -> np.ndarray:
    # Lerp in base + frac*(delta) form: constant inputs reproduce exactly.
    lo, hi, frac = _axis_samples(block.shape[0], dst)
    lower = block[lo]
    return lower + frac.reshape((-1,) + (1,) * (block.ndim - 1)) * (block[hi] - lower)


def _resample(f: FeatureMap, target: tuple[int, int]) -> FeatureMap:
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target grid dimensions must be positive, got {target}")
    if (th, tw) == f.grid:
        return FeatureMap(f.data, f.grid)
    block = f.as_grid()
    block = _resample_axis(block, th)
    block = _resample_axis(np.swapaxes(block, 0, 1), tw)
    block = np.swapaxes(block, 0, 1)
    return FeatureMap(block.reshape(th * tw, f.d), (th, tw))


def upsample(f: FeatureMap, target: tuple[int, int]) -> FeatureMap:
    """Bilinearly enlarge ``f`` to the target grid (both axes >= source)."""
    if target[0] < f.h or target[1] < f.w:
        raise ValueError(f"upsample target {target} smaller than source grid {f.grid}")
    return _resample(f, target)


def downsample(f: FeatureMap, target: tuple[int, int]) -> FeatureMap:
    """Bilinearly shrink ``f`` to the target grid (both axes <= source)."""
    if target[0] > f.h or target[1] > f.w:
        raise ValueError(f"downsample target {target} larger than source grid {f.grid}")
    return _resample(f, target)


def spectrum_split(f: FeatureMap, cutoff_fraction: float) -> SpectrumSplit:
    """Split 2-D DFT energy of the grid into low and high radial bands.

    Each channel is transformed with an unnormalized 2-D DFT and bin energies
    are divided by h*w, so the total equals the squared Frobenius norm of the
    map (Parseval).  A bin whose radial frequency falls strictly below
    ``cutoff_fraction`` times the maximum radius counts as low; the rest are
    high.  The DC bin is always low.
    """
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError(f"cutoff_fraction must lie in (0, 1), got {cutoff_fraction}")
    h, w = f.grid
    spectra = np.fft.fft2(f.as_grid(), axes=(0, 1))
    energy = (spectra.real**2 + spectra.imag**2).sum(axis=2) / (h * w)

    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    radius = np.hypot(fy[:, None], fx[None, :])
    max_radius = np.hypot(np.abs(fy).max(), np.abs(fx).max())
    low_mask = (radius < cutoff_fraction * max_radius) | (radius == 0.0)

    low = float(energy[low_mask].sum())
    high = float(energy[~low_mask].sum())
    return SpectrumSplit(low_energy=low, high_energy=high, cutoff_fraction=float(cutoff_fraction))

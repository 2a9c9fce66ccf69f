"""Synthetic CT substrate: ellipse phantoms, parallel-beam projection,
photon-statistics dose noise, and filtered backprojection.

Geometry conventions: images are square, pixel units, rotation center at
((s-1)/2, (s-1)/2). Detector coordinates and ray steps use the same unit
(detector_spacing defaults to one pixel). View angles cover [0, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Phantom",
    "Sinogram",
    "render_ellipses",
    "generate_phantom_volume",
    "radon",
    "apply_low_dose",
    "fbp",
    "OPTICAL_DEPTHS",
]

# apply_low_dose scales attenuation so the sinogram peak maps to this
# many optical depths (exp(-4) ~ 1.8% transmission at the thickest path).
OPTICAL_DEPTHS = 4.0


@dataclass
class Phantom:
    """A 2-D attenuation map in [0, 1] plus its generating ellipses.

    Each ellipse is (cx, cy, a, b, theta, intensity) in normalized
    coordinates: centers and axes relative to the half-width, so the
    image square spans [-1, 1] on both axes.
    """

    image: np.ndarray
    ellipses: list = field(default_factory=list)


def render_ellipses(size, ellipses):
    """Sum of ellipse indicators on a size x size grid, clipped to [0, 1]."""
    img = np.zeros((size, size), dtype=np.float64)
    if not ellipses:
        return img
    half = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    x = (xs - half) / half
    y = (ys - half) / half
    for cx, cy, a, b, theta, intensity in ellipses:
        ct, st = math.cos(theta), math.sin(theta)
        xr = (x - cx) * ct + (y - cy) * st
        yr = -(x - cx) * st + (y - cy) * ct
        inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        img[inside] += intensity
    return np.clip(img, 0.0, 1.0)


def generate_phantom_volume(seed, n_slices, size, n_ellipses_range=(4, 8)):
    """Deterministic stack of phantoms with slow inter-slice drift.

    One draw fixes base ellipse parameters and per-slice velocities; each
    slice adds a small seeded jitter. Neighboring slices therefore stay
    strongly correlated while distant slices diverge.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if n_slices < 1:
        raise ValueError(f"n_slices must be >= 1, got {n_slices}")
    lo, hi = n_ellipses_range
    rng = np.random.default_rng(seed)
    n_ell = int(rng.integers(lo, hi + 1))
    base = []
    vel = []
    for e in range(n_ell):
        if e == 0:
            # Body outline: large, nearly centered, slow.
            base.append((rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03),
                         rng.uniform(0.75, 0.85), rng.uniform(0.6, 0.7),
                         rng.uniform(-0.2, 0.2), rng.uniform(0.25, 0.35)))
            vel.append((rng.uniform(-0.002, 0.002), rng.uniform(-0.002, 0.002),
                        rng.uniform(-0.002, 0.002), rng.uniform(-0.002, 0.002),
                        rng.uniform(-0.005, 0.005), 0.0))
        else:
            base.append((rng.uniform(-0.45, 0.45), rng.uniform(-0.35, 0.35),
                         rng.uniform(0.06, 0.3), rng.uniform(0.06, 0.3),
                         rng.uniform(0.0, math.pi), rng.uniform(0.15, 0.45)))
            vel.append((rng.uniform(-0.012, 0.012), rng.uniform(-0.012, 0.012),
                        rng.uniform(-0.006, 0.006), rng.uniform(-0.006, 0.006),
                        rng.uniform(-0.03, 0.03), rng.uniform(-0.01, 0.01)))
    seed_list = list(np.atleast_1d(np.asarray(seed, dtype=np.int64)))
    out = []
    for i in range(n_slices):
        jrng = np.random.default_rng([int(v) for v in seed_list] + [i])
        ellipses = []
        for (bp, vp) in zip(base, vel):
            jit = jrng.uniform(-0.002, 0.002, size=6)
            cx = bp[0] + i * vp[0] + jit[0]
            cy = bp[1] + i * vp[1] + jit[1]
            a = max(0.02, bp[2] + i * vp[2] + jit[2])
            b = max(0.02, bp[3] + i * vp[3] + jit[3])
            theta = bp[4] + i * vp[4] + jit[4]
            intensity = float(np.clip(bp[5] + i * vp[5] + jit[5], 0.05, 0.6))
            ellipses.append((cx, cy, a, b, theta, intensity))
        out.append(Phantom(image=render_ellipses(size, ellipses), ellipses=ellipses))
    return out


@dataclass
class Sinogram:
    """Line integrals, one row per view angle."""

    data: np.ndarray
    view_angles: np.ndarray
    detector_spacing: float = 1.0
    i0: float = math.inf

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.view_angles = np.asarray(self.view_angles, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"sinogram must be (n_views, n_detectors), got {self.data.shape}")
        if self.data.shape[0] != self.view_angles.shape[0]:
            raise ValueError("one angle per view required")
        if not (self.i0 > 0):
            raise ValueError(f"i0 must be > 0, got {self.i0}")
        if not np.isfinite(self.data).all():
            raise ValueError("sinogram data must be finite")

    @property
    def n_views(self):
        return self.data.shape[0]

    @property
    def n_detectors(self):
        return self.data.shape[1]


def radon(image, n_views, n_detectors, detector_spacing=1.0, oversample=2):
    """Parallel-beam forward projection of a square image.

    Each view rotates the sampling grid and sums bilinearly interpolated
    values along rays at ``oversample`` steps per pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"image must be square 2-d, got {img.shape}")
    if n_views < 1 or n_detectors < 1:
        raise ValueError("n_views and n_detectors must be >= 1")
    s = img.shape[0]
    pad = np.zeros((s + 2, s + 2), dtype=np.float64)
    pad[1:-1, 1:-1] = img
    center = (s - 1) / 2.0
    angles = np.arange(n_views, dtype=np.float64) * math.pi / n_views
    t = (np.arange(n_detectors, dtype=np.float64) - (n_detectors - 1) / 2.0) * detector_spacing
    step = 1.0 / oversample
    half_len = s * math.sqrt(2.0) / 2.0
    n_steps = int(math.ceil(2.0 * half_len / step)) + 1
    ray = -half_len + step * np.arange(n_steps, dtype=np.float64)
    data = np.empty((n_views, n_detectors), dtype=np.float64)
    for v, theta in enumerate(angles):
        ct, st = math.cos(theta), math.sin(theta)
        # px/py carry the +1 shift into the zero-padded frame.
        px = center + 1.0 + t[:, None] * ct - ray[None, :] * st
        py = center + 1.0 + t[:, None] * st + ray[None, :] * ct
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        inside = (x0 >= 0) & (x0 <= s) & (y0 >= 0) & (y0 <= s)
        x0c = np.clip(x0, 0, s)
        y0c = np.clip(y0, 0, s)
        fx = px - x0
        fy = py - y0
        vals = (pad[y0c, x0c] * (1 - fy) * (1 - fx)
                + pad[y0c, x0c + 1] * (1 - fy) * fx
                + pad[y0c + 1, x0c] * fy * (1 - fx)
                + pad[y0c + 1, x0c + 1] * fy * fx)
        data[v] = (vals * inside).sum(axis=1) * step
    return Sinogram(data=data, view_angles=angles, detector_spacing=detector_spacing)


def apply_low_dose(sino: Sinogram, i0, seed):
    """Photon-count noise at dose i0 via Beer-Lambert transmission.

    The line integrals are scaled so the sinogram peak corresponds to
    OPTICAL_DEPTHS; counts are Poisson-sampled and clamped to >= 1
    before the log transform back to line integrals.
    """
    if not (i0 > 0):
        raise ValueError(f"i0 must be > 0, got {i0}")
    pmax = float(sino.data.max())
    mu = OPTICAL_DEPTHS / pmax if pmax > 0 else 1.0
    rng = np.random.default_rng(seed)
    expected = i0 * np.exp(-mu * sino.data)
    counts = np.maximum(rng.poisson(expected), 1)
    noisy = -np.log(counts / i0) / mu
    return Sinogram(data=noisy, view_angles=sino.view_angles.copy(),
                    detector_spacing=sino.detector_spacing, i0=float(i0))


def _ramlak_kernel(n_detectors, spacing):
    """Discrete ramp filter taps for offsets -(n-1) .. (n-1)."""
    n = np.arange(-(n_detectors - 1), n_detectors, dtype=np.float64)
    kern = np.zeros_like(n)
    kern[n_detectors - 1] = 1.0 / (4.0 * spacing * spacing)
    odd = (np.abs(n) % 2) == 1
    kern[odd] = -1.0 / (math.pi * n[odd] * spacing) ** 2
    return kern


def fbp(sino: Sinogram, out_size):
    """Filtered backprojection onto an out_size x out_size grid.

    Ramp filtering runs as an FFT-based linear convolution with the
    discrete ramp kernel; backprojection interpolates each filtered view
    linearly and weights the angle sum by pi / n_views. Output is
    clamped to [0, 1.5]; any volume-level renormalization is the
    caller's concern.
    """
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    nv, nd = sino.data.shape
    d = sino.detector_spacing
    kern = _ramlak_kernel(nd, d)
    m = 1
    while m < nd + kern.size - 1:
        m *= 2
    kf = np.fft.rfft(kern, m)
    pf = np.fft.rfft(sino.data, m, axis=1)
    conv = np.fft.irfft(pf * kf[None, :], m, axis=1)
    # Taps start at offset -(nd-1), so the aligned slice begins there.
    filtered = conv[:, nd - 1:2 * nd - 1] * d
    center = (out_size - 1) / 2.0
    ys, xs = np.mgrid[0:out_size, 0:out_size]
    x = xs - center
    y = ys - center
    recon = np.zeros((out_size, out_size), dtype=np.float64)
    det_center = (nd - 1) / 2.0
    for v in range(nv):
        theta = sino.view_angles[v]
        tcoord = (x * math.cos(theta) + y * math.sin(theta)) / d + det_center
        idx = np.floor(tcoord).astype(np.int64)
        frac = tcoord - idx
        valid = (idx >= 0) & (idx <= nd - 2)
        idxc = np.clip(idx, 0, nd - 2)
        view = filtered[v]
        recon += np.where(valid, view[idxc] * (1 - frac) + view[idxc + 1] * frac, 0.0)
    recon *= math.pi / nv
    return np.clip(recon, 0.0, 1.5)

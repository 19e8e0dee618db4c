"""Procedural (image, elevation, temporal stack, labels) sample generator.

The class structure is built so that each architectural module is
causally necessary:

* class 0 (water): low-elevation basins, distinctly bluish, plus small
  "marsh" clusters on ridges — a fine water/grass checkerboard whose
  patch-mean color exactly matches the uniform "shade" clusters that stay
  ridge grass, so the pair is separable only at sub-patch resolution
  (the multi-scale branch);
* classes 1 (lowland grass) and 2 (ridge grass): identical RGB texture
  distributions, separable only through the elevation band;
* class 3 (seasonal farmland): patches carved out of both grass bands.
  In the final frame its color matches the scene's grass tint codebook,
  but which of the two tints marks farmland is a latent crop phase,
  drawn independently for each of four vertical stripes, that only the
  earlier frames (a plow/crop cycle) reveal — so it is separable only
  via the temporal stack plus spatially resolved prompts, and the
  farmland fraction is randomized so tint rarity carries no
  information.

Every sample is a pure function of (config seed, sample index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, FormatError
from .tensorio import load_tensor, save_tensor

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

WATER, LOWLAND, RIDGE, FARMLAND = 0, 1, 2, 3

PHASE_STRIPES = 4  # independent crop-phase stripes per scene

WATER_RGB = np.array([0.13, 0.22, 0.55], dtype=np.float32)
GRASS_RGB = np.array([0.25, 0.48, 0.18], dtype=np.float32)
# two-entry tint codebook; the per-scene phase decides which entry marks
# farmland and which marks grass, so the marginal distributions coincide
TINTS = np.array([[0.12, 0.0, -0.12], [-0.12, 0.0, 0.12]], dtype=np.float32)
# plow/crop colors for the historical frames, one per phase
PLOW_RGB = np.array([[0.55, 0.36, 0.10], [0.12, 0.20, 0.42]], dtype=np.float32)


@dataclass(frozen=True)
class GenConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    frames: int = 3  # temporal stack length T
    seed: int = 0
    water_quantile: float = 0.20
    ridge_quantile: float = 0.55
    farm_frac_range: tuple = (0.30, 0.70)
    noise: float = 0.035
    texture: float = 0.04
    speckle_clusters: tuple = (3, 6)  # marsh/shade clusters each (inclusive)

    def __post_init__(self):
        if self.num_classes != 4:
            raise ConfigError("the canonical suite is fixed at 4 classes")
        if self.frames < 1:
            raise ConfigError(f"temporal stack length must be >= 1, got {self.frames}")
        if not (0 < self.water_quantile < self.ridge_quantile < 1):
            raise ConfigError(
                f"elevation quantiles must satisfy 0 < water < ridge < 1, got "
                f"{self.water_quantile}, {self.ridge_quantile}"
            )
        lo, hi = self.farm_frac_range
        if not (0 < lo <= hi < 1):
            raise ConfigError(f"farmland fraction range {self.farm_frac_range} is degenerate")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    dem: np.ndarray  # (1, H, W) float32, arbitrary units
    frames: list  # T x (3, H, W) float32, oldest first; last ~ image
    labels: np.ndarray  # (H, W) uint8 class ids
    index: int = 0
    phase: tuple = ()  # latent crop phase per stripe (not persisted)
    marsh: np.ndarray = None  # (H, W) bool cluster masks (not persisted)
    shade: np.ndarray = None


def diamond_square(power, rng, roughness=0.55):
    """Fractal heightfield on a (2^power+1)^2 grid, midpoint displacement."""
    n = 2**power
    g = np.zeros((n + 1, n + 1), dtype=np.float64)
    g[0 :: n, 0 :: n] = rng.normal(0.0, 1.0, size=(2, 2))
    step = n
    amp = 1.0
    while step > 1:
        half = step // 2
        # diamond: centers of squares
        c = (
            g[:-step:step, :-step:step]
            + g[step::step, :-step:step]
            + g[:-step:step, step::step]
            + g[step::step, step::step]
        ) / 4.0
        g[half::step, half::step] = c + rng.normal(0.0, amp, size=c.shape)
        # square: edge midpoints, averaging available neighbors
        mask = np.zeros_like(g, dtype=bool)
        mask[half::step, ::step] = True
        mask[::step, half::step] = True
        ii, jj = np.nonzero(mask)
        acc = np.zeros(len(ii))
        cnt = np.zeros(len(ii))
        for di, dj in ((-half, 0), (half, 0), (0, -half), (0, half)):
            ni, nj = ii + di, jj + dj
            ok = (ni >= 0) & (ni <= n) & (nj >= 0) & (nj <= n)
            acc[ok] += g[ni[ok], nj[ok]]
            cnt[ok] += 1
        g[ii, jj] = acc / cnt + rng.normal(0.0, amp, size=len(ii))
        step = half
        amp *= roughness
    return g


def _rank01(x):
    """Map values to their empirical quantiles in [0, 1)."""
    flat = x.reshape(-1)
    ranks = np.empty_like(flat)
    ranks[np.argsort(flat, kind="stable")] = np.arange(flat.size)
    return (ranks / flat.size).reshape(x.shape)


def _smooth_noise(rng, h, w, sigma_frac=0.12):
    """Low-frequency random field via FFT low-pass, unit-ish variance."""
    white = rng.normal(size=(h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    lp = np.exp(-(fy**2 + fx**2) / (2 * sigma_frac**2))
    field = np.fft.ifft2(np.fft.fft2(white) * lp).real
    sd = field.std()
    return field / (sd if sd > 1e-12 else 1.0)


def _disk(h, w, cy, cx, radius):
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def generate_sample(cfg, index):
    """Deterministically generate sample ``index`` of a dataset."""
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width

    power = int(np.ceil(np.log2(max(h, w))))
    terrain = diamond_square(power, rng)[:h, :w]
    elev01 = _rank01(terrain)

    wq = cfg.water_quantile + rng.uniform(-0.03, 0.03)
    rq = cfg.ridge_quantile + rng.uniform(-0.05, 0.05)
    labels = np.full((h, w), LOWLAND, dtype=np.uint8)
    labels[elev01 < wq] = WATER
    labels[elev01 > rq] = RIDGE

    # farmland: irregular patches carved from both grass bands; the patch
    # fraction is randomized widely so scene-level area statistics carry
    # no information about which tint is farmland
    grass = labels != WATER
    farm_field = _smooth_noise(rng, h, w, sigma_frac=0.10)
    farm_frac = rng.uniform(*cfg.farm_frac_range)
    if grass.any():
        thr = np.quantile(farm_field[grass], 1.0 - farm_frac)
        labels[grass & (farm_field > thr)] = FARMLAND

    # marsh/shade clusters on the grass bands: marsh is water (fine blocks
    # of water and grass color), shade keeps its band's grass label (a
    # uniform mid color); their patch means coincide, so the pair is
    # ambiguous except at sub-patch resolution. Both bands host both
    # cluster kinds, so the mid color itself carries no band information.
    grass_band = (labels == LOWLAND) | (labels == RIDGE)
    marsh = np.zeros((h, w), dtype=bool)
    shade = np.zeros((h, w), dtype=bool)
    band_idx = np.flatnonzero(grass_band)
    if band_idx.size:
        lo, hi = cfg.speckle_clusters
        for target in (marsh, shade):
            for _ in range(int(rng.integers(lo, hi + 1))):
                center = band_idx[rng.integers(band_idx.size)]
                cy, cx = divmod(center, w)
                for _ in range(int(rng.integers(3, 7))):
                    dy, dx = rng.integers(-8, 9, size=2)
                    r = rng.uniform(5.0, 9.0)
                    target |= _disk(h, w, cy + dy, cx + dx, r)
        marsh &= grass_band
        shade &= grass_band & ~marsh
        labels[marsh] = WATER

    # independent crop phase per vertical stripe: recovering it requires
    # both the temporal stack and a spatially resolved prompt set
    phase = tuple(int(p) for p in rng.integers(0, 2, size=PHASE_STRIPES))
    stripe = np.minimum(
        np.arange(w) * PHASE_STRIPES // w, PHASE_STRIPES - 1
    )[None, :].repeat(h, axis=0)
    phase_map = np.take(np.array(phase), stripe)
    farm = labels == FARMLAND

    grass_color = (GRASS_RGB + TINTS[1 - phase_map]).astype(np.float32)
    base = np.empty((h, w, 3), dtype=np.float32)
    base[:] = grass_color
    base[farm] = (GRASS_RGB + TINTS[phase_map])[farm]
    base[labels == WATER] = WATER_RGB
    # marsh: 4px water/grass checkerboard; shade: the checkerboard's mean
    checker = ((np.arange(h)[:, None] // 4 + np.arange(w)[None, :] // 4) % 2) == 0
    base[marsh & checker] = WATER_RGB
    base[marsh & ~checker] = grass_color[marsh & ~checker]
    base[shade] = 0.5 * (WATER_RGB + grass_color[shade])

    texture = _smooth_noise(rng, h, w, sigma_frac=0.25)[..., None] * cfg.texture

    def finish(img_hw3, gen):
        noisy = img_hw3 + texture + gen.normal(0.0, cfg.noise, size=(h, w, 3))
        return np.clip(noisy, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)

    image = finish(base, rng)

    # historical frames, oldest first; plow amplitude decays to zero so
    # the newest frame matches the current image's distribution
    frames = []
    amps = np.linspace(1.0, 0.0, cfg.frames) if cfg.frames > 1 else np.array([0.0])
    plow_map = PLOW_RGB[phase_map]
    for amp in amps:
        fb = base.copy()
        fb[farm] = (1.0 - amp) * base[farm] + amp * plow_map[farm]
        fb += rng.normal(0.0, 0.01)  # per-frame global illumination jitter
        frames.append(finish(fb, rng))

    dem = (elev01 * rng.uniform(200.0, 800.0) + rng.uniform(0.0, 400.0)).astype(
        np.float32
    )[None]

    return Sample(image=image, dem=dem, frames=frames, labels=labels,
                  index=index, phase=phase, marsh=marsh, shade=shade)


def generate(cfg, n):
    """Generate a dataset of n samples; same (cfg, n) is byte-identical."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    return [generate_sample(cfg, i) for i in range(n)]


def save_dataset(samples, directory, cfg):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        sid = f"sample_{s.index:04d}"
        ids.append(sid)
        sub = directory / sid
        sub.mkdir(exist_ok=True)
        save_tensor(sub / "image.tsr", s.image)
        save_tensor(sub / "dem.tsr", s.dem)
        for t, frame in enumerate(s.frames):
            save_tensor(sub / f"frame_{t}.tsr", frame)
        save_tensor(sub / "labels.tsr", s.labels.astype(np.uint8))
    manifest = {
        "version": MANIFEST_VERSION,
        "n": len(samples),
        "H": cfg.height,
        "W": cfg.width,
        "C": cfg.num_classes,
        "T": cfg.frames,
        "seed": cfg.seed,
        "ids": ids,
    }
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(directory):
    """Load a saved dataset; returns (samples, manifest)."""
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"{directory}: missing {MANIFEST_NAME}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    for key in ("version", "n", "H", "W", "C", "T", "seed", "ids"):
        if key not in manifest:
            raise DatasetError(f"{directory}: manifest lacks required key {key!r}")
    samples = []
    for i, sid in enumerate(manifest["ids"]):
        sub = directory / sid
        try:
            image = load_tensor(sub / "image.tsr")
            dem = load_tensor(sub / "dem.tsr")
            frames = [load_tensor(sub / f"frame_{t}.tsr") for t in range(manifest["T"])]
            labels = load_tensor(sub / "labels.tsr")
        except FileNotFoundError as exc:
            raise DatasetError(f"{sub}: missing tensor file ({exc})") from exc
        if labels.dtype != np.uint8:
            raise FormatError(f"{sub}/labels.tsr: labels must be u8")
        samples.append(
            Sample(image=image, dem=dem, frames=frames,
                   labels=labels, index=i)
        )
    return samples, manifest

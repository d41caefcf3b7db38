"""Procedural conveyor runs with aggregate-only labels.

Material on the belt is a set of paraboloid piles. Its amount per metre of
belt (the *load*, m^3/m) times the regime's bulk density gives the hidden
linear mass density (kg/m) that the vision model is meant to recover. The
camera view applies a row-dependent perspective scale; the regime changes
colour and density but not pile geometry, so equal loads give equal pixel
coverage whatever the regime.

Profile, lighting and fault parameter ranges are desk-scale defaults, not
measured field distributions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .runs import Run
from .trainer import SPLIT_NAMES, split_indices
from .volumetric import PointCloud, bin_volume

PROFILES = ("constant", "ramp", "intermittent")

# dark belt colours: painted green, rust, bare steel, blue-grey
BELT_COLORS = ((0.15, 0.22, 0.16), (0.24, 0.18, 0.14), (0.20, 0.20, 0.21), (0.15, 0.19, 0.23))
REGIME_COLORS = {
    "green": (0.78, 0.82, 0.40),
    "burnt": (0.62, 0.40, 0.28),
}
_FALLBACK_COLORS = ((0.85, 0.75, 0.45), (0.55, 0.55, 0.70), (0.70, 0.45, 0.55))
PILE_HEIGHT = 0.15        # m, nominal pile height
CLUTTER_K = 150.0   # trash fragments per frame at full clutter and full coverage
SHADE_HEIGHT = 0.30       # m, summed height rendered at full brightness
CLOUD_SPACING = 0.0125    # m, stereo point grid


@dataclass(frozen=True)
class Regime:
    tag: str
    density: float                 # kg/m^3: load (m^3/m) -> linear mass density (kg/m)
    color: tuple = (0.8, 0.8, 0.4)


@dataclass
class RigConfig:
    frame_shape: tuple = (64, 64, 3)
    dt: float = 1 / 7.5
    n_runs: int = 200
    run_length: tuple = (30, 90)
    empty_fraction: float = 0.1
    profile_mix: dict = field(default_factory=lambda: {"constant": 0.3, "ramp": 0.35,
                                                       "intermittent": 0.35})
    regimes: tuple = (("green", 300.0), ("burnt", 450.0))
    load_range: tuple = (0.006, 0.018)       # m^3/m, per-run typical load
    lighting: tuple = (0.8, 1.2)
    occluder_rate: float = 0.05              # fraction of runs with a fan episode
    speed_range: tuple = (1.5, 3.5)          # m/s
    speed_fault_rate: float = 0.0            # fraction of nonempty runs with a bad speed sensor
    speed_fault_factors: tuple = ((0.25, 0.45), (1.8, 2.5))  # gross faults: slip, miscount
    clutter_rate: float = 0.0                # fraction of nonempty runs with heavy trash
    glare_rate: float = 0.0                  # fraction of nonempty runs with sun glare episodes
    roi: tuple = (0.0, 1.0, 0.0, 0.5)
    bin_width: float = 0.05
    split: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.frame_shape = tuple(int(v) for v in self.frame_shape)
        self.run_length = tuple(int(v) for v in self.run_length)
        self.regimes = tuple((str(t), float(d)) for t, d in self.regimes)
        for name in ("load_range", "lighting", "speed_range", "roi", "split"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.speed_fault_factors = tuple(tuple(float(v) for v in r) for r in self.speed_fault_factors)
        if not 0 <= self.empty_fraction <= 1:
            raise ValueError("empty fraction must lie in [0, 1]")
        if not self.regimes:
            raise ValueError("at least one density regime is required")
        if self.run_length[0] < 2 or self.run_length[1] < self.run_length[0]:
            raise ValueError("run lengths must satisfy 2 <= min <= max")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.frame_shape[2] not in (1, 3) or min(self.frame_shape[:2]) < 16:
            raise ValueError(f"unsupported frame shape {self.frame_shape}")
        for rate in (self.occluder_rate, self.speed_fault_rate, self.clutter_rate, self.glare_rate):
            if not 0 <= rate <= 1:
                raise ValueError("event rates must lie in [0, 1]")
        if set(self.profile_mix) - set(PROFILES) or sum(self.profile_mix.values()) <= 0:
            raise ValueError(f"profile mix must weight {PROFILES}")

    @property
    def regime_list(self) -> list[Regime]:
        out = []
        for i, (tag, dens) in enumerate(self.regimes):
            color = REGIME_COLORS.get(tag, _FALLBACK_COLORS[i % len(_FALLBACK_COLORS)])
            out.append(Regime(tag, dens, color))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunSidecar:
    """Evaluation-only truth for one run; never read by training."""

    run_id: str
    hidden_density: np.ndarray       # kg/m per frame
    true_speed: np.ndarray           # m/s per frame
    regime: list                     # tag per frame
    occluder: np.ndarray             # bool per frame
    glare: np.ndarray                # bool per frame
    coverage: np.ndarray             # material pixel fraction per frame
    speed_fault: bool = False
    fault_factor: float = 1.0
    clutter: float = 0.0             # trash fragments per frame, relative level

    def frame_mass(self, dt: float) -> np.ndarray:
        return self.hidden_density * self.true_speed * dt

    @property
    def n(self) -> int:
        return self.hidden_density.size


@dataclass
class FrameState:
    hidden_density: float
    regime: Regime
    lighting: float
    belt_color: tuple
    belt_offset: float = 0.0       # m travelled, moves the slats
    occluder: bool = False
    glare: tuple | None = None     # (row, col, radius) in pixels
    clutter: float = 0.0


@dataclass
class RenderedFrame:
    image: np.ndarray           # float (H, W, C) in [0, 1]
    height_map: np.ndarray      # (nx, ny) metres over the ROI grid
    coverage: float
    cloud: np.ndarray           # stereo points (N, 3)


class Renderer:
    """Renders frames for one geometry; caches pixel and grid coordinates."""

    def __init__(self, cfg: RigConfig):
        self.cfg = cfg
        h, w, _ = cfg.frame_shape
        self.rows, self.cols = np.mgrid[0:h, 0:w].astype(np.float64)
        x0, x1, y0, y1 = cfg.roi
        gx = np.arange(x0 + CLOUD_SPACING / 2, x1, CLOUD_SPACING)
        gy = np.arange(y0 + CLOUD_SPACING / 2, y1, CLOUD_SPACING)
        self.gx, self.gy = np.meshgrid(gx, gy, indexing="ij")
        # top row is the far end of the ROI; far material looks smaller
        self.persp = 0.6 + 0.8 * np.arange(h) / (h - 1)
        corner = np.hypot(self.rows, self.cols)
        angle = np.arctan2(self.rows, self.cols)
        blades = np.cos(6 * angle) > -0.2
        self.fan_mask = (corner < 0.45 * h) & blades
        self.fan_hub = corner < 0.12 * h

    def _piles(self, load: float, rng: np.random.Generator):
        x0, x1, y0, y1 = self.cfg.roi
        k = int(rng.integers(6, 13))
        px = rng.uniform(x0 + 0.06 * (x1 - x0), x1 - 0.06 * (x1 - x0), k)
        py = rng.uniform(y0 + 0.1 * (y1 - y0), y1 - 0.1 * (y1 - y0), k)
        rel = rng.uniform(0.6, 1.4, k)
        heights = PILE_HEIGHT * rng.uniform(0.8, 1.2, k)
        if load <= 0:
            return px, py, np.zeros(k), heights
        # paraboloid volume pi r^2 h / 2 summed over piles = load * ROI length
        scale = np.sqrt(2 * load * (x1 - x0) / (np.pi * np.sum(rel ** 2 * heights)))
        return px, py, scale * rel, heights

    def render(self, state: FrameState, rng: np.random.Generator) -> RenderedFrame:
        cfg = self.cfg
        h, w, c = cfg.frame_shape
        x0, x1, y0, y1 = cfg.roi
        load = state.hidden_density / state.regime.density
        px, py, radius, heights = self._piles(load, rng)

        # belt: base colour, moving slats, sensor noise
        belt = np.asarray(state.belt_color)
        slat_period = 0.12
        slat_pos = (1 - self.rows / (h - 1)) * (x1 - x0) + state.belt_offset
        slat = np.where((slat_pos % slat_period) < 0.025, 0.6, 1.0)
        img = belt[None, None, :] * slat[..., None] * (1 + 0.05 * rng.standard_normal((h, w, 1)))

        # piles in the image plane
        z = np.zeros((h, w))
        ppm_r = h / (x1 - x0)
        ppm_c = w / (y1 - y0)
        for k in range(radius.size):
            if radius[k] <= 0:
                continue
            r = (1 - (px[k] - x0) / (x1 - x0)) * (h - 1)
            s = self.persp[int(round(r))]
            ccol = (w - 1) / 2 + ((py[k] - y0) / (y1 - y0) - 0.5) * (w - 1) * (0.55 + 0.45 * s / 1.4)
            rr = radius[k] * ppm_r * s
            rc = radius[k] * ppm_c * s * 0.5
            d2 = ((self.rows - r) / rr) ** 2 + ((self.cols - ccol) / rc) ** 2
            z += heights[k] * np.clip(1 - d2, 0, None)
        mask = z > 0
        coverage = float(mask.mean())
        if mask.any():
            shade = 0.5 + 0.5 * np.clip(z / SHADE_HEIGHT, 0, 1)
            texture = 1 + 0.08 * rng.standard_normal((h, w, 1))
            mat = np.asarray(state.regime.color)[None, None, :] * (shade[..., None] * texture)
            img = np.where(mask[..., None], mat, img)

        if state.clutter > 0:
            img = self._draw_clutter(img, state, coverage, rng)

        img = img * state.lighting * (1 + 0.03 * rng.standard_normal())
        if state.occluder:
            fan = np.where(self.fan_hub, 0.05, 0.14)[..., None]
            img = np.where((self.fan_mask | self.fan_hub)[..., None], fan * state.lighting, img)
        if state.glare is not None:
            gr, gc, grad = state.glare
            fall = np.clip(1 - np.hypot(self.rows - gr, self.cols - gc) / grad, 0, 1)[..., None]
            img = img + (1.0 - img) * 0.9 * fall
        img = np.clip(img, 0, 1)
        if c == 1:
            img = img @ np.array([0.299, 0.587, 0.114])[:, None]

        # height field over the ROI grid and a noisy stereo point cloud
        hz = np.zeros(self.gx.shape)
        for k in range(radius.size):
            if radius[k] <= 0:
                continue
            d2 = ((self.gx - px[k]) ** 2 + (self.gy - py[k]) ** 2) / radius[k] ** 2
            hz += heights[k] * np.clip(1 - d2, 0, None)
        noisy = hz + 0.003 * rng.standard_normal(hz.shape)
        spikes = rng.random(hz.shape) < 0.02
        noisy = np.where(spikes, noisy + rng.uniform(0.2, 0.5, hz.shape), noisy)
        keep = np.ones(hz.shape, dtype=bool)
        if state.glare is not None:
            # glare washes out the matching part of the point cloud
            gr, gc, grad = state.glare
            grow = (1 - gr / (h - 1)) * (x1 - x0) + x0
            gcol = gc / (w - 1) * (y1 - y0) + y0
            keep &= np.hypot(self.gx - grow, (self.gy - gcol) * 2) > grad / h * (x1 - x0)
        cloud = np.stack([self.gx[keep], self.gy[keep], noisy[keep]], axis=1)
        return RenderedFrame(img, hz, coverage, cloud)

    def _draw_clutter(self, img, state: FrameState, coverage: float, rng):
        h, w, _ = img.shape
        # trash rides with the crop, so fragments scale with the material present
        count = int(rng.poisson(CLUTTER_K * state.clutter * coverage))
        leaf = np.asarray(state.regime.color) * np.array([0.95, 1.0, 0.85])
        for _ in range(count):
            r, cc = rng.uniform(0, h), rng.uniform(0, w)
            a, b = rng.uniform(1.0, 2.5), rng.uniform(1.5, 3.5)
            m = ((self.rows - r) / a) ** 2 + ((self.cols - cc) / b) ** 2 < 1
            img = np.where(m[..., None], leaf * rng.uniform(0.7, 0.9), img)
        return img


def render_frame(state: FrameState, rng: np.random.Generator, cfg: RigConfig | None = None):
    return Renderer(cfg or RigConfig()).render(state, rng)


# -- run generation ----------------------------------------------------------

@dataclass
class RunPlan:
    empty: bool = False
    speed_fault: bool = False
    clutter: bool = False
    glare: bool = False


def plan_runs(cfg: RigConfig) -> list[RunPlan]:
    """Decide which runs are empty or carry injected events (exact counts)."""
    rng = np.random.default_rng([cfg.seed, 0xE7])
    n = cfg.n_runs
    plans = [RunPlan() for _ in range(n)]
    n_empty = int(round(n * cfg.empty_fraction))
    empties = rng.choice(n, n_empty, replace=False)
    for i in empties:
        plans[i].empty = True
    nonempty = np.array([i for i in range(n) if not plans[i].empty], dtype=int)
    for attr, rate in (("speed_fault", cfg.speed_fault_rate), ("clutter", cfg.clutter_rate),
                       ("glare", cfg.glare_rate)):
        k = int(round(nonempty.size * rate))
        for i in rng.choice(nonempty, k, replace=False) if k else []:
            setattr(plans[i], attr, True)
    return plans


def _smooth_noise(rng, n, scale, corr=0.85):
    e = rng.standard_normal(n) * scale * np.sqrt(1 - corr ** 2)
    out = np.empty(n)
    acc = rng.standard_normal() * scale
    for j in range(n):
        acc = corr * acc + e[j]
        out[j] = acc
    return out


def flow_profile(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Relative load over a run (mean around 1)."""
    t = np.arange(n) / max(n - 1, 1)
    if kind == "constant":
        base = np.ones(n)
    elif kind == "ramp":
        knots = np.sort(rng.uniform(0, 1, 3))
        levels = rng.uniform(0.2, 1.8, 5)
        levels[0] = rng.uniform(0.0, 0.4)
        levels[-1] = rng.uniform(0.0, 0.4)
        base = np.interp(t, np.concatenate([[0], knots, [1]]), levels)
    elif kind == "intermittent":
        base = np.zeros(n)
        n_bursts = max(1, int(rng.integers(2, 6) * n / 150))
        for _ in range(n_bursts):
            centre = rng.uniform(0, n)
            width = rng.uniform(2, 12)
            base += rng.uniform(0.8, 2.5) * np.exp(-0.5 * ((np.arange(n) - centre) / width) ** 2)
        base[base < 0.05] = 0.0
    else:
        raise ValueError(f"unknown flow profile {kind!r}")
    noisy = base * (1 + _smooth_noise(rng, n, 0.15, 0.6))
    return np.clip(noisy, 0, None)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_run(cfg: RigConfig, index: int, plan: RunPlan | None = None,
                 renderer: Renderer | None = None):
    """Build one run and its truth sidecar. Deterministic in (cfg, index, plan)."""
    plan = plan or plan_runs(cfg)[index]
    renderer = renderer or Renderer(cfg)
    rng = np.random.default_rng([cfg.seed, index])
    h, w, c = cfg.frame_shape
    lo, hi = cfg.run_length
    n = int(rng.integers(lo, hi + 1))
    regimes = cfg.regime_list
    regime = regimes[int(rng.integers(len(regimes)))]

    t = np.arange(n)
    base_speed = rng.uniform(*cfg.speed_range)
    speed = base_speed * (1 + 0.12 * np.sin(2 * np.pi * t / rng.uniform(40, 160) + rng.uniform(0, 6)))
    kinds = list(cfg.profile_mix)
    weights = np.array([cfg.profile_mix[k] for k in kinds], dtype=float)
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    load = rng.uniform(*cfg.load_range) * flow_profile(kind, n, rng)

    occluder = np.zeros(n, dtype=bool)
    if rng.random() < cfg.occluder_rate:
        # fan episodes come with a slow belt and little material
        shortest = min(8, n)
        length = int(rng.integers(shortest, max(shortest + 1, n // 3)))
        start = int(rng.integers(0, n - length + 1))
        occluder[start:start + length] = True
        speed[occluder] *= rng.uniform(0.1, 0.3)
        load[occluder] *= 0.1
    if plan.empty:
        load[:] = 0.0
        kind = "empty"

    speed = _f32(np.clip(speed, 0.05, None))
    hidden = _f32(regime.density * load)
    fault = 1.0
    if plan.speed_fault:
        lo_f, hi_f = cfg.speed_fault_factors[int(rng.integers(len(cfg.speed_fault_factors)))]
        fault = float(rng.uniform(lo_f, hi_f))
    recorded = _f32(speed * fault)

    glare = np.zeros(n, dtype=bool)
    glare_spot = None
    if plan.glare:
        length = int(rng.integers(max(2, n // 3), max(3, 2 * n // 3)))
        start = int(rng.integers(0, n - length + 1))
        glare[start:start + length] = True
        glare_spot = (rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w, rng.uniform(0.25, 0.4) * h)
    clutter = float(rng.uniform(0.6, 1.0)) if plan.clutter else 0.0

    belt = np.asarray(BELT_COLORS[int(rng.integers(len(BELT_COLORS)))]) * rng.uniform(0.9, 1.1, 3)
    lighting = rng.uniform(*cfg.lighting)
    frame_rng = np.random.default_rng([cfg.seed, index, 1])

    images = np.empty((n, h, w, c), dtype=np.uint8)
    volumes = np.empty(n)
    coverage = np.empty(n)
    offset = 0.0
    for j in range(n):
        state = FrameState(hidden[j], regime, lighting, tuple(belt), offset, bool(occluder[j]),
                           glare_spot if glare[j] else None, clutter)
        frame = renderer.render(state, frame_rng)
        images[j] = np.round(frame.image * 255).astype(np.uint8)
        volumes[j] = bin_volume(PointCloud(frame.cloud, cfg.roi, cfg.bin_width))
        coverage[j] = frame.coverage
        offset += speed[j] * cfg.dt

    total = float(np.sum(hidden * speed * cfg.dt))
    run_id = f"run-{index:04d}"
    run = Run(run_id, images, recorded, total, empty=plan.empty, regime=regime.tag,
              input_scale=1 / 255, volumes=_f32(volumes), meta={"profile": kind})
    sidecar = RunSidecar(run_id, hidden, speed, [regime.tag] * n, occluder, glare, coverage,
                         plan.speed_fault, fault, clutter)
    return run, sidecar


def generate_runs(cfg: RigConfig, indices=None):
    """Yield (run, sidecar) pairs in index order."""
    plans = plan_runs(cfg)
    renderer = Renderer(cfg)
    for i in (range(cfg.n_runs) if indices is None else indices):
        yield generate_run(cfg, i, plans[i], renderer)


def dataset_splits(cfg: RigConfig) -> dict[str, list[int]]:
    plans = plan_runs(cfg)
    parts = split_indices(cfg.n_runs, [p.empty for p in plans], cfg.split, cfg.seed)
    return dict(zip(SPLIT_NAMES, parts))


def generate_dataset(cfg: RigConfig, out_dir) -> dict:
    """Write per-split record and sidecar files plus ``manifest.json``."""
    from . import records

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = plan_runs(cfg)
    splits = dataset_splits(cfg)
    renderer = Renderer(cfg)
    manifest = {
        "seed": cfg.seed,
        "n_runs": cfg.n_runs,
        "counts": {},
        "empty_runs": {},
        "regime_mix": {tag: 0 for tag, _ in cfg.regimes},
        "speed_fault_runs": sum(p.speed_fault for p in plans),
        "clutter_heavy_runs": sum(p.clutter for p in plans),
        "glare_runs": sum(p.glare for p in plans),
        "files": {},
        "config": cfg.to_dict(),
    }
    for name, idx in splits.items():
        data_path = out / f"{name}.mfds"
        side_path = out / f"{name}.mfsc"
        regimes_seen = []

        def runs_iter():
            for i in idx:
                run, side = generate_run(cfg, i, plans[i], renderer)
                sidecars.append(side)
                regimes_seen.append(run.regime if not run.empty else None)
                yield run

        sidecars: list[RunSidecar] = []
        records.write_dataset(data_path, runs_iter(), len(idx), cfg.frame_shape)
        records.write_sidecars(side_path, sidecars)
        manifest["counts"][name] = len(idx)
        manifest["empty_runs"][name] = sum(plans[i].empty for i in idx)
        for tag in regimes_seen:
            if tag is not None:
                manifest["regime_mix"][tag] += 1
        manifest["files"][name] = {"records": data_path.name, "sidecars": side_path.name}
    manifest["empty_runs"]["total"] = sum(p.empty for p in plans)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest

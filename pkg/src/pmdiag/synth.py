"""Deterministic generator of nominal and faulty point-machine manoeuvres.

Every trace carries the three-phase power signature: an unlock current peak,
a movement plateau, and a lock peak, built from raised-cosine segments so the
curve is continuously differentiable and every phase has compact support.
Faults deform one specific aspect of that signature:

* Obstacle      - additive bump inside the movement plateau
* Friction      - elevated plateau over the whole movement phase
* PowerSupply   - global amplitude sag plus a slow supply ripple
* Misalignment  - widened, attenuated lock peak and a stretched movement

Generation is pure given a seed; per-manoeuvre sub-streams are spawned from
(seed, index) so datasets are reproducible independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    Dataset,
    FaultClass,
    Manoeuvre,
    PmDiagError,
    SupplyKind,
    TechnologyProfile,
    sha256_of_obj,
)

# Idle time prepended and appended to every trace, in seconds.
PAD_SECONDS = 0.5

# Lock peak amplitude as a fraction of the unlock peak.
LOCK_PEAK_RATIO = 0.9

# Characteristic supply-instability frequency in Hz. The PowerSupply ripple
# runs at twice this. Kept well below the feature Nyquist rate so the ripple
# survives smoothing and 128-point resampling.
SUPPLY_RIPPLE_HZ = {SupplyKind.AC: 0.25, SupplyKind.DC: 0.4}

DEFAULT_PROFILES = {
    "MJ": TechnologyProfile("MJ", SupplyKind.AC, 100.0, 8.0, 3.0, 5.0),
    "P80": TechnologyProfile("P80", SupplyKind.DC, 100.0, 6.0, 2.5, 6.0),
    "EbiSwitch": TechnologyProfile("EbiSwitch", SupplyKind.AC, 100.0, 5.0, 2.0, 4.0),
}


class InvalidFaultError(PmDiagError):
    """A fault spec names the Nominal class."""


@dataclass(frozen=True)
class SynthConfig:
    """Generation parameters for one technology."""

    profile: TechnologyProfile
    unlock_peak_duration: float = 0.8
    lock_peak_duration: float = 0.8
    noise_sigma: float = 0.0
    amplitude_jitter: float = 0.0
    duration_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.unlock_peak_duration <= 0 or self.lock_peak_duration <= 0:
            raise ValueError("peak durations must be positive")
        if self.unlock_peak_duration + self.lock_peak_duration >= 2 * self.profile.move_duration:
            raise ValueError("peak durations too long for the movement")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("amplitude_jitter", "duration_jitter"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def to_obj(self) -> dict:
        return {
            "profile": {
                "name": self.profile.name,
                "supply": self.profile.supply.value,
                "sample_rate": self.profile.sample_rate,
                "nominal_peak_amps": self.profile.nominal_peak_amps,
                "plateau_amps": self.profile.plateau_amps,
                "move_duration": self.profile.move_duration,
            },
            "unlock_peak_duration": self.unlock_peak_duration,
            "lock_peak_duration": self.lock_peak_duration,
            "noise_sigma": self.noise_sigma,
            "amplitude_jitter": self.amplitude_jitter,
            "duration_jitter": self.duration_jitter,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FaultSpec:
    """Fault class plus severity and optional pinned geometry.

    `obstacle_center_frac` pins the bump centre inside the movement phase
    (fraction of the movement, default random in the middle 80%);
    `ripple_phase` offsets the PowerSupply ripple, which is phase-locked to
    the start of the trace (the supply sag oscillation responds to the load
    step, so its phase is not free).
    """

    fault_class: FaultClass
    severity: float
    obstacle_center_frac: float | None = None
    ripple_phase: float = 0.0

    def __post_init__(self):
        if self.fault_class == FaultClass.Nominal:
            raise InvalidFaultError("fault class must not be Nominal")
        if not 0 <= self.severity <= 1:
            raise ValueError("severity must be in [0, 1]")
        if self.obstacle_center_frac is not None and not 0.1 <= self.obstacle_center_frac <= 0.9:
            raise ValueError("obstacle_center_frac must be in [0.1, 0.9]")


@dataclass(frozen=True)
class CurveParams:
    """Integer-sample layout of one noiseless trace."""

    sample_rate: float
    n_pad: int
    n_rise: int
    n_fall: int
    n_move: int
    n_lock_rise: int
    n_lock_fall: int
    a_peak: float
    a_plat: float
    a_lock: float

    @property
    def move_start(self) -> int:
        return self.n_pad + self.n_rise + self.n_fall

    @property
    def move_end(self) -> int:
        return self.move_start + self.n_move

    @property
    def unlock_support(self) -> tuple[int, int]:
        """Index range of the constructed unlock peak, pad excluded."""
        return self.n_pad, self.move_start

    @property
    def lock_support(self) -> tuple[int, int]:
        return self.move_end, self.move_end + self.n_lock_rise + self.n_lock_fall

    @property
    def total(self) -> int:
        return self.move_end + self.n_lock_rise + self.n_lock_fall + self.n_pad


def _n_samples(duration_s: float, fs: float) -> int:
    return max(1, round(duration_s * fs))


def nominal_params(cfg: SynthConfig, amp_scale: float = 1.0, dur_scale: float = 1.0) -> CurveParams:
    """Sample layout for a nominal trace under the given jitter scales."""
    fs = cfg.profile.sample_rate
    a_peak = cfg.profile.nominal_peak_amps * amp_scale
    a_plat = cfg.profile.plateau_amps * amp_scale
    return CurveParams(
        sample_rate=fs,
        n_pad=_n_samples(PAD_SECONDS, fs),
        n_rise=_n_samples(cfg.unlock_peak_duration * dur_scale / 2, fs),
        n_fall=_n_samples(cfg.unlock_peak_duration * dur_scale / 2, fs),
        n_move=_n_samples(cfg.profile.move_duration * dur_scale, fs),
        n_lock_rise=_n_samples(cfg.lock_peak_duration * dur_scale / 2, fs),
        n_lock_fall=_n_samples(cfg.lock_peak_duration * dur_scale / 2, fs),
        a_peak=a_peak,
        a_plat=a_plat,
        a_lock=LOCK_PEAK_RATIO * a_peak,
    )


def build_curve(p: CurveParams) -> np.ndarray:
    """Noiseless trace for a sample layout.

    Raised-cosine segments join with zero slope, so the apex hits a_peak
    exactly and the unlock fall lands exactly on a_plat.
    """

    def seg(n: int, start: float, end: float) -> np.ndarray:
        # half-cosine ease from start to end; cos(pi*n/n) = -1 exactly, so
        # the last sample lands exactly on `end`
        j = np.arange(1, n + 1, dtype=np.float64)
        w = (1.0 - np.cos(np.pi * j / n)) / 2.0
        return start + (end - start) * w

    parts = [
        np.zeros(p.n_pad),
        seg(p.n_rise, 0.0, p.a_peak),
        seg(p.n_fall, p.a_peak, p.a_plat),
        np.full(p.n_move, p.a_plat),
        seg(p.n_lock_rise, p.a_plat, p.a_lock),
        seg(p.n_lock_fall, p.a_lock, 0.0),
        np.zeros(p.n_pad),
    ]
    return np.concatenate(parts)


def _jitter_draws(cfg: SynthConfig, rng: np.random.Generator) -> tuple[float, float]:
    amp = rng.uniform(-cfg.amplitude_jitter, cfg.amplitude_jitter)
    dur = rng.uniform(-cfg.duration_jitter, cfg.duration_jitter)
    return 1.0 + amp, 1.0 + dur


def _seed_sequence(rng) -> np.random.SeedSequence:
    if isinstance(rng, np.random.SeedSequence):
        return rng
    return np.random.SeedSequence(rng)


def _finish(cfg, curve, noise_ss, manoeuvre_id, timestamp, label) -> Manoeuvre:
    if cfg.noise_sigma > 0:
        noise = np.random.default_rng(noise_ss).normal(0.0, cfg.noise_sigma, size=curve.shape)
        curve = curve + noise
    return Manoeuvre(
        id=manoeuvre_id,
        technology=cfg.profile.name,
        timestamp=timestamp,
        samples=curve,
        sample_rate=cfg.profile.sample_rate,
        label=label,
    )


def generate_nominal(
    cfg: SynthConfig,
    rng: "int | np.random.SeedSequence | None" = None,
    *,
    manoeuvre_id: str = "synth-Nominal-0",
    timestamp: float = 0.0,
) -> Manoeuvre:
    """Generate one healthy manoeuvre; bit-identical for a given seed."""
    ss = _seed_sequence(cfg.seed if rng is None else rng)
    common_ss, noise_ss, _fault_ss = ss.spawn(3)
    amp_scale, dur_scale = _jitter_draws(cfg, np.random.default_rng(common_ss))
    curve = build_curve(nominal_params(cfg, amp_scale, dur_scale))
    return _finish(cfg, curve, noise_ss, manoeuvre_id, timestamp, FaultClass.Nominal)


def inject_fault(
    cfg: SynthConfig,
    spec: FaultSpec,
    rng: "int | np.random.SeedSequence | None" = None,
    *,
    manoeuvre_id: str | None = None,
    timestamp: float = 0.0,
) -> Manoeuvre:
    """Generate a faulty manoeuvre: same-seed twin of the nominal trace.

    The nominal jitter and noise streams are shared with `generate_nominal`,
    so for equal seeds the faulty trace differs from its nominal twin only by
    the fault deformation (and by length, for Misalignment).
    """
    if spec.fault_class == FaultClass.Nominal:
        raise InvalidFaultError("fault class must not be Nominal")
    ss = _seed_sequence(cfg.seed if rng is None else rng)
    common_ss, noise_ss, fault_ss = ss.spawn(3)
    amp_scale, dur_scale = _jitter_draws(cfg, np.random.default_rng(common_ss))
    fault_rng = np.random.default_rng(fault_ss)
    params = nominal_params(cfg, amp_scale, dur_scale)
    s = spec.severity
    fs = cfg.profile.sample_rate

    if spec.fault_class == FaultClass.Obstacle:
        curve = build_curve(params)
        width = max(1, round((0.05 + 0.15 * s) * params.n_move))
        center_frac = spec.obstacle_center_frac
        if center_frac is None:
            center_frac = fault_rng.uniform(0.1, 0.9)
        center = params.move_start + center_frac * params.n_move
        start = int(round(center - width / 2))
        start = min(max(start, params.move_start), params.move_end - width)
        amp = (0.5 + 1.5 * s) * params.a_plat
        j = np.arange(width, dtype=np.float64)
        bump = amp * (1.0 - np.cos(2.0 * np.pi * j / max(width - 1, 1))) / 2.0
        curve[start : start + width] += bump
    elif spec.fault_class == FaultClass.Friction:
        curve = build_curve(params)
        curve[params.move_start : params.move_end] *= 1.0 + 0.2 + 0.4 * s
    elif spec.fault_class == FaultClass.PowerSupply:
        curve = build_curve(params)
        ripple_hz = 2.0 * SUPPLY_RIPPLE_HZ[cfg.profile.supply]
        t = np.arange(curve.size, dtype=np.float64) / fs
        scale = 1.0 - 0.2 - 0.3 * s
        ripple = 0.05 * s * np.sin(2.0 * np.pi * ripple_hz * t + spec.ripple_phase)
        curve = curve * scale * (1.0 + ripple)
    else:  # Misalignment
        lock_widen = 1.0 + 2.0 * s
        params = replace(
            params,
            n_lock_rise=max(1, round(params.n_lock_rise * lock_widen)),
            n_lock_fall=max(1, round(params.n_lock_fall * lock_widen)),
            a_lock=params.a_lock * (1.0 - 0.3 * s),
            n_move=params.n_move + round(0.2 * s * params.n_move),
        )
        curve = build_curve(params)

    if manoeuvre_id is None:
        manoeuvre_id = f"synth-{spec.fault_class.name}-0"
    return _finish(cfg, curve, noise_ss, manoeuvre_id, timestamp, spec.fault_class)


def generate_dataset(
    counts: dict[FaultClass, int],
    cfg: SynthConfig,
    severity_range: tuple[float, float] = (0.3, 1.0),
    seed: "int | None" = None,
) -> Dataset:
    """Generate a labelled dataset with exactly the requested per-class counts.

    Manoeuvre ids are "synth-{class}-{index}"; the output order is a seeded
    shuffle over all classes. Fault severities are uniform in severity_range.
    """
    lo, hi = severity_range
    if not (0 <= lo <= hi <= 1):
        raise ValueError("severity_range must satisfy 0 <= lo <= hi <= 1")
    for cls, n in counts.items():
        if n < 0:
            raise ValueError(f"negative count for {cls.name}")

    plan: list[tuple[FaultClass, int]] = []
    for cls in sorted(counts, key=int):
        plan.extend((cls, j) for j in range(counts[cls]))
    total = len(plan)

    root = _seed_sequence(cfg.seed if seed is None else seed)
    children = root.spawn(total + 2)
    severities = np.random.default_rng(children[total]).uniform(lo, hi, size=total)

    manoeuvres: list[Manoeuvre] = []
    for i, (cls, j) in enumerate(plan):
        mid = f"synth-{cls.name}-{j}"
        ts = 60.0 * i
        if cls == FaultClass.Nominal:
            m = generate_nominal(cfg, children[i], manoeuvre_id=mid, timestamp=ts)
        else:
            m = inject_fault(
                cfg,
                FaultSpec(cls, float(severities[i])),
                children[i],
                manoeuvre_id=mid,
                timestamp=ts,
            )
        manoeuvres.append(m)

    perm = np.random.default_rng(children[total + 1]).permutation(total)
    ordered = tuple(manoeuvres[k] for k in perm)
    provenance = "synth:" + sha256_of_obj(
        {
            "counts": {cls.name: counts[cls] for cls in sorted(counts, key=int)},
            "config": cfg.to_obj(),
            "severity_range": [lo, hi],
            "seed": cfg.seed if seed is None else seed,
        }
    )[:16]
    return Dataset(manoeuvres=ordered, provenance=provenance)

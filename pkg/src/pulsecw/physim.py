"""Forward model of the heralded-photon homodyne experiment.

A two-mode squeezed vacuum source is heralded by a threshold detector,
the signal mode suffers loss, and its quadrature is embedded in a
broadband vacuum-noise trace sampled by a fast digitizer.  Detector
bandwidth, electronic noise, herald timing jitter and dark counts are
added on top.

Time axis: the digitizer is triggered by the herald, so ``herald_time``
sits at the nominal trigger position of every frame and it is the pulse
(and the heralded wavepacket riding on it) that wanders by the jitter.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import framesio
from .fockcore import FockDensityMatrix, apply_loss, fock_wavefunctions
from .rng import substream

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
SHOT_NOISE_SHIFT = 1e-9


@dataclass(frozen=True)
class SourceConfig:
    lam: float = 0.09
    eta_idler: float = 0.9
    eta_signal: float = 0.785
    cutoff: int = 15

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lam must lie in [0, 1), got {self.lam}")
        for name in ("eta_idler", "eta_signal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.cutoff < 1:
            raise ValueError("cutoff must be at least 1")


@dataclass(frozen=True)
class AcquisitionConfig:
    sample_period: float = 1.0 / 256e9
    trace_length: int = 512
    pulse_fwhm: float = 74e-12
    pulse_shape: str = "gaussian"
    pulse_center: float = 0.6e-9
    repetition_period: float = 0.8e-9
    detector_bandwidth: float = 43e9
    electronic_noise_rel: float = 0.05
    jitter_sigma: float = 30e-12
    dark_fraction: float = 0.01

    def __post_init__(self):
        if self.sample_period <= 0 or self.trace_length < 2:
            raise ValueError("sample_period and trace_length must be positive")
        if self.pulse_shape != "gaussian":
            raise ValueError(f"unsupported pulse_shape {self.pulse_shape!r}")
        if self.pulse_fwhm <= 0 or self.repetition_period <= 0:
            raise ValueError("pulse_fwhm and repetition_period must be positive")
        if self.detector_bandwidth < 0 or self.electronic_noise_rel < 0 or self.jitter_sigma < 0:
            raise ValueError("bandwidth, electronic noise and jitter must be non-negative")
        if not 0.0 <= self.dark_fraction <= 1.0:
            raise ValueError("dark_fraction must lie in [0, 1]")
        duration = self.trace_length * self.sample_period
        if duration <= 4 * self.pulse_fwhm + SHOT_NOISE_SHIFT:
            raise ValueError(
                f"trace of {duration * 1e9:.3f} ns is too short for a {self.pulse_fwhm * 1e12:.0f} ps"
                " pulse plus the 1 ns shot-noise shift"
            )
        lo = self.pulse_center - 2 * self.pulse_fwhm
        hi = self.pulse_center + SHOT_NOISE_SHIFT + 2 * self.pulse_fwhm
        if lo < 0 or hi > duration:
            raise ValueError("pulse_center leaves no room for the shot-noise reference mode")

    @property
    def duration(self) -> float:
        return self.trace_length * self.sample_period

    @property
    def pulse_sigma(self) -> float:
        return self.pulse_fwhm * FWHM_TO_SIGMA

    def times(self) -> np.ndarray:
        return np.arange(self.trace_length) * self.sample_period


@dataclass(frozen=True)
class HomodyneFrame:
    frame_id: int
    trace: np.ndarray
    reference_trace: np.ndarray
    herald_time: float
    sample_period: float

    def __post_init__(self):
        if self.trace.shape != self.reference_trace.shape:
            raise ValueError("trace and reference_trace must have the same length")


@dataclass(frozen=True)
class TemporalMode:
    samples: np.ndarray
    sample_period: float

    def __post_init__(self):
        norm = self.norm()
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"temporal mode is not unit-norm (norm {norm:.12g})")

    def norm(self) -> float:
        return math.sqrt(float(np.dot(self.samples, self.samples)) * self.sample_period)

    def __len__(self):
        return len(self.samples)

    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) * self.sample_period

    def overlap(self, other: "TemporalMode") -> float:
        return float(np.dot(self.samples, other.samples) * self.sample_period)

    def shifted(self, shift: float) -> "TemporalMode":
        """Delay the mode by ``shift`` seconds, rounded to whole samples.

        Raises ValueError if any non-zero sample would leave the trace.
        """
        k = int(round(shift / self.sample_period))
        nz = np.flatnonzero(np.abs(self.samples) > 1e-12 * np.max(np.abs(self.samples)))
        if nz[0] + k < 0 or nz[-1] + k >= len(self.samples):
            raise ValueError(f"mode shifted by {shift * 1e12:.0f} ps exits the trace")
        out = np.zeros_like(self.samples)
        if k >= 0:
            out[k:] = self.samples[: len(out) - k]
        else:
            out[:k] = self.samples[-k:]
        return TemporalMode(out / math.sqrt(np.dot(out, out) * self.sample_period), self.sample_period)

    @classmethod
    def from_samples(cls, samples, sample_period: float) -> "TemporalMode":
        """Normalize arbitrary samples to a unit-norm mode."""
        s = np.asarray(samples, dtype=float)
        n = math.sqrt(float(np.dot(s, s)) * sample_period)
        if n == 0:
            raise ValueError("mode samples are all zero")
        return cls(s / n, sample_period)


@dataclass(frozen=True)
class QuadratureSample:
    value: float
    theta: float
    frame_id: int = -1


def gaussian_envelope(acq: AcquisitionConfig, center: float) -> np.ndarray:
    t = acq.times()
    return np.exp(-0.5 * ((t - center) / acq.pulse_sigma) ** 2)


def gaussian_mode(acq: AcquisitionConfig, center: float | None = None) -> TemporalMode:
    """Gaussian wavepacket whose amplitude FWHM equals ``acq.pulse_fwhm``."""
    c = acq.pulse_center if center is None else center
    return TemporalMode.from_samples(gaussian_envelope(acq, c), acq.sample_period)


# --- source model ---------------------------------------------------------


def heralded_state(cfg: SourceConfig) -> FockDensityMatrix:
    """Signal-mode state conditioned on a click of the idler threshold detector."""
    if cfg.lam == 0.0:
        raise ValueError("lam = 0: herald probability vanishes, no conditional state")
    if cfg.eta_idler == 0.0:
        raise ValueError("eta_idler = 0: herald probability vanishes, no conditional state")
    n = np.arange(cfg.cutoff + 1)
    lam2 = cfg.lam**2
    weights = (1 - lam2) * lam2**n * (1.0 - (1.0 - cfg.eta_idler) ** n)
    rho = FockDensityMatrix.from_diagonal(weights / weights.sum())
    return apply_loss(rho, cfg.eta_signal)


def quadrature_pdf(rho: FockDensityMatrix):
    """Phase-averaged quadrature density of a diagonal state, as a callable."""
    if not rho.is_diagonal():
        raise ValueError("quadrature_pdf requires a diagonal (phase-insensitive) state")
    probs = rho.diagonal
    nmax = rho.cutoff

    def pdf(x):
        psi = fock_wavefunctions(nmax, x)
        return np.tensordot(probs, psi * psi, axes=1)

    return pdf


class QuadratureSampler:
    """Inverse-CDF sampler for the quadrature marginals of Fock states.

    One CDF table per photon number on a fixed grid; draws are linear
    interpolations of the inverse table.
    """

    def __init__(self, rho: FockDensityMatrix, x_max: float = 8.0, step: float = 1e-3):
        if not rho.is_diagonal():
            raise ValueError("sampling requires a diagonal (phase-insensitive) state")
        probs = np.clip(rho.diagonal, 0.0, None)
        self.cum_probs = np.cumsum(probs / probs.sum())
        self.cum_probs[-1] = 1.0
        self.grid = np.arange(-x_max, x_max + 0.5 * step, step)
        psi = fock_wavefunctions(rho.cutoff, self.grid)
        dens = psi * psi
        cdf = np.concatenate(
            [np.zeros((rho.dim, 1)), np.cumsum(0.5 * (dens[:, 1:] + dens[:, :-1]) * step, axis=1)],
            axis=1,
        )
        self.cdfs = cdf / cdf[:, -1:]

    def draw_photon_number(self, u: float) -> int:
        return int(np.searchsorted(self.cum_probs, u, side="right").clip(max=len(self.cum_probs) - 1))

    def inverse_cdf(self, n: int, u):
        return np.interp(u, self.cdfs[n], self.grid)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Return (photon_numbers, x) arrays, or scalars when ``size`` is None."""
        if size is None:
            n = self.draw_photon_number(rng.random())
            return n, float(self.inverse_cdf(n, rng.random()))
        u_n = rng.random(size)
        u_x = rng.random(size)
        ns = np.searchsorted(self.cum_probs, u_n, side="right").clip(max=len(self.cum_probs) - 1)
        xs = np.empty(size)
        for n in np.unique(ns):
            sel = ns == n
            xs[sel] = self.inverse_cdf(n, u_x[sel])
        return ns, xs


def sample_quadrature(rho: FockDensityMatrix, rng: np.random.Generator, sampler=None) -> QuadratureSample:
    """One phase-randomized quadrature draw from a diagonal state."""
    sampler = sampler or QuadratureSampler(rho)
    _, x = sampler.sample(rng)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return QuadratureSample(value=x, theta=theta)


# --- traces ---------------------------------------------------------------


def lowpass(trace: np.ndarray, acq: AcquisitionConfig) -> np.ndarray:
    """Single-pole low-pass at ``acq.detector_bandwidth`` (0 disables)."""
    if acq.detector_bandwidth <= 0:
        return trace
    alpha = 1.0 - math.exp(-2.0 * math.pi * acq.detector_bandwidth * acq.sample_period)
    return lfilter([alpha], [1.0, alpha - 1.0], trace, axis=-1)


def fourier_shift(x: np.ndarray, shift_samples: float) -> np.ndarray:
    """Circularly delay ``x`` by a possibly fractional number of samples."""
    L = x.shape[-1]
    k = np.fft.rfftfreq(L)
    return np.fft.irfft(np.fft.rfft(x) * np.exp(-2j * np.pi * k * shift_samples), n=L)


def _vacuum_noise(acq: AcquisitionConfig, rng: np.random.Generator):
    dt = acq.sample_period
    shot = rng.normal(0.0, math.sqrt(0.5 / dt), acq.trace_length)
    elec = rng.normal(0.0, math.sqrt(acq.electronic_noise_rel * 0.5 / dt), acq.trace_length)
    return shot, elec


def synthesize_frame(
    x_s: float,
    mode: TemporalMode,
    acq: AcquisitionConfig,
    rng: np.random.Generator,
    frame_id: int = 0,
    pulse_time: float | None = None,
) -> HomodyneFrame:
    """Trace whose projection on ``mode`` is ``x_s`` and vacuum elsewhere.

    The reference trace is the noiseless pulse envelope centered at
    ``pulse_time`` (default ``acq.pulse_center``); the herald fires exactly
    at the pulse until ``inject_artifacts`` adds jitter.
    """
    if len(mode) != acq.trace_length:
        raise ValueError(f"mode has {len(mode)} samples, trace has {acq.trace_length}")
    dt = acq.sample_period
    f = mode.samples
    shot, elec = _vacuum_noise(acq, rng)
    trace = shot + f * (x_s - np.dot(f, shot) * dt)
    trace = lowpass(trace + elec, acq)
    t_p = acq.pulse_center if pulse_time is None else pulse_time
    return HomodyneFrame(
        frame_id=frame_id,
        trace=trace,
        reference_trace=gaussian_envelope(acq, t_p),
        herald_time=t_p,
        sample_period=dt,
    )


@dataclass(frozen=True)
class ArtifactDraw:
    jitter: float  # herald_time - pulse_time
    dark: bool


def draw_artifacts(acq: AcquisitionConfig, rng: np.random.Generator) -> ArtifactDraw:
    """Consume a fixed number of variates so streams stay aligned across configs."""
    z = rng.standard_normal()
    u_dark = rng.random()
    u_pos = rng.random()
    if u_dark < acq.dark_fraction:
        return ArtifactDraw(jitter=(u_pos - 0.5) * acq.repetition_period, dark=True)
    return ArtifactDraw(jitter=z * acq.jitter_sigma, dark=False)


def apply_artifacts(
    frame: HomodyneFrame, draw: ArtifactDraw, acq: AcquisitionConfig, rng: np.random.Generator
) -> HomodyneFrame:
    if draw.dark:
        shot, elec = _vacuum_noise(acq, rng)
        trace = lowpass(shot + elec, acq)
    elif draw.jitter == 0.0:
        return frame
    else:
        trace = fourier_shift(frame.trace, -draw.jitter / acq.sample_period)
    # trigger stays at herald_time; the pulse sits one jitter earlier
    pulse_time = frame.herald_time - draw.jitter
    return HomodyneFrame(
        frame_id=frame.frame_id,
        trace=trace,
        reference_trace=gaussian_envelope(acq, pulse_time),
        herald_time=frame.herald_time,
        sample_period=frame.sample_period,
    )


def inject_artifacts(frame: HomodyneFrame, acq: AcquisitionConfig, rng: np.random.Generator) -> HomodyneFrame:
    """Add herald timing jitter and dark-count heralds to an ideal frame.

    A dark herald is regenerated as pure vacuum with its herald placed
    uniformly within the repetition period around the pulse.
    """
    return apply_artifacts(frame, draw_artifacts(acq, rng), acq, rng)


# --- runs -----------------------------------------------------------------


@dataclass
class SimulationTruth:
    """Per-frame ground truth kept alongside a simulated frames file."""

    frame_id: np.ndarray
    theta: np.ndarray
    x_s: np.ndarray
    photon_number: np.ndarray
    pulse_time: np.ndarray
    herald_time: np.ndarray
    dark: np.ndarray
    state: FockDensityMatrix | None = field(default=None, repr=False)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("frame_id,theta,x_s,photon_number,pulse_time,herald_time,dark\n")
            for row in zip(self.frame_id, self.theta, self.x_s, self.photon_number,
                           self.pulse_time, self.herald_time, self.dark):
                k, th, x, n, tp, th_, d = row
                fh.write(f"{int(k)},{float(th)!r},{float(x)!r},{int(n)},{float(tp)!r},{float(th_)!r},{int(d)}\n")

    @classmethod
    def read_csv(cls, path) -> "SimulationTruth":
        data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="ascii")
        data = np.atleast_1d(data)
        return cls(
            frame_id=data["frame_id"].astype(np.int64),
            theta=data["theta"].astype(float),
            x_s=data["x_s"].astype(float),
            photon_number=data["photon_number"].astype(np.int64),
            pulse_time=data["pulse_time"].astype(float),
            herald_time=data["herald_time"].astype(float),
            dark=data["dark"].astype(bool),
        )


def truth_path(frames_path) -> str:
    return str(frames_path) + ".truth.csv"


def _simulate_frame(k, seed, sampler, mode, acq):
    rng = substream(seed, "frame", k)
    n, x = sampler.sample(rng)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    frame = synthesize_frame(x, mode, acq, rng, frame_id=k)
    draw = draw_artifacts(acq, rng)
    frame = apply_artifacts(frame, draw, acq, rng)
    return frame, n, x, theta, draw


def simulate_frames(source: SourceConfig, acq: AcquisitionConfig, frame_ids, seed: int, threads: int = 1):
    """Generate frames in memory; returns (FrameBatch, SimulationTruth).

    Frame ``k`` depends only on (seed, k), so any subset or thread count
    reproduces the same frames bit for bit.
    """
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    rho = heralded_state(source)
    sampler = QuadratureSampler(rho)
    mode = gaussian_mode(acq)
    N, L = len(frame_ids), acq.trace_length
    traces = np.empty((N, L))
    refs = np.empty((N, L))
    herald = np.empty(N)
    truth = SimulationTruth(
        frame_id=frame_ids.copy(), theta=np.empty(N), x_s=np.empty(N),
        photon_number=np.empty(N, dtype=np.int64), pulse_time=np.empty(N),
        herald_time=herald, dark=np.zeros(N, dtype=bool), state=rho,
    )

    def work(idx):
        for i in idx:
            frame, n, x, theta, draw = _simulate_frame(int(frame_ids[i]), seed, sampler, mode, acq)
            traces[i] = frame.trace
            refs[i] = frame.reference_trace
            herald[i] = frame.herald_time
            truth.theta[i] = theta
            truth.x_s[i] = 0.0 if draw.dark else x
            truth.photon_number[i] = -1 if draw.dark else n
            truth.pulse_time[i] = frame.herald_time - draw.jitter
            truth.dark[i] = draw.dark

    chunks = np.array_split(np.arange(N), max(1, min(threads, N)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, chunks))
    else:
        for c in chunks:
            work(c)
    batch = framesio.FrameBatch(
        frame_ids=frame_ids.astype(np.uint64), herald_times=herald.copy(),
        traces=traces, references=refs, sample_period=acq.sample_period,
    )
    return batch, truth


def simulate_run(
    source: SourceConfig,
    acq: AcquisitionConfig,
    n_frames: int,
    seed: int,
    out_path,
    fmt: str = "bin",
    threads: int = 1,
    config: dict | None = None,
    chunk_size: int = 4096,
) -> SimulationTruth:
    """Simulate ``n_frames`` heralded frames and write them to ``out_path``.

    A ground-truth sidecar is written next to the frames file.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    header = framesio.make_header(n_frames, acq.trace_length, acq.sample_period, config or {}, fmt)
    parts = []
    with framesio.FramesWriter(out_path, header) as writer:
        for start in range(0, n_frames, chunk_size):
            ids = np.arange(start, min(start + chunk_size, n_frames))
            batch, truth = simulate_frames(source, acq, ids, seed, threads)
            writer.write(batch)
            parts.append(truth)
    truth = SimulationTruth(
        **{
            name: np.concatenate([getattr(p, name) for p in parts])
            for name in ("frame_id", "theta", "x_s", "photon_number", "pulse_time", "herald_time", "dark")
        },
        state=parts[0].state,
    )
    truth.write_csv(truth_path(out_path))
    return truth

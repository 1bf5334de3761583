"""Post-processing of heralded homodyne frames.

align -> reject dark heralds -> PCA temporal mode -> project -> calibrate
against the shot-noise level measured in a time-shifted copy of the mode.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .framesio import FrameBatch
from .physim import SHOT_NOISE_SHIFT, QuadratureSample, TemporalMode
from .rng import substream

PCA_CHUNK = 4096


class AnalysisError(ValueError):
    pass


class DegenerateModeError(AnalysisError):
    """Leading PCA eigenvalue is not separated from the rest."""


@dataclass
class AlignedFrameSet:
    frame_ids: np.ndarray
    herald_times: np.ndarray
    traces: np.ndarray
    references: np.ndarray
    sample_period: float
    alignment_offsets: np.ndarray  # seconds, positive = pulse later than template
    pulse_times: np.ndarray  # estimated pulse time in the raw frame
    template_center: float  # where every aligned pulse now sits
    rejected_count: int = 0

    def __len__(self):
        return len(self.frame_ids)

    @property
    def trace_length(self) -> int:
        return self.traces.shape[1]

    def subset(self, keep: np.ndarray, rejected: int) -> "AlignedFrameSet":
        return AlignedFrameSet(
            self.frame_ids[keep], self.herald_times[keep], self.traces[keep], self.references[keep],
            self.sample_period, self.alignment_offsets[keep], self.pulse_times[keep],
            self.template_center, self.rejected_count + rejected,
        )

    @property
    def frames(self):
        batch = FrameBatch(self.frame_ids, self.herald_times, self.traces, self.references, self.sample_period)
        return list(batch)


@dataclass
class QuadratureSet:
    """Projected quadratures, iterable as QuadratureSample records."""

    frame_ids: np.ndarray
    thetas: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        for k, th, v in zip(self.frame_ids, self.thetas, self.values):
            yield QuadratureSample(value=float(v), theta=float(th), frame_id=int(k))

    def scaled(self, c: float) -> "QuadratureSet":
        return QuadratureSet(self.frame_ids, self.thetas, self.values * c)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("frame_id,theta,value\n")
            for k, th, v in zip(self.frame_ids, self.thetas, self.values):
                fh.write(f"{int(k)},{float(th)!r},{float(v)!r}\n")

    @classmethod
    def read_csv(cls, path) -> "QuadratureSet":
        with open(path) as fh:
            head = fh.readline().strip()
            if head != "frame_id,theta,value":
                raise AnalysisError(f"{path}: expected header 'frame_id,theta,value', got {head!r}")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.size == 0:
            data = np.zeros((0, 3))
        return cls(data[:, 0].astype(np.int64), data[:, 1], data[:, 2])

    @classmethod
    def from_samples(cls, samples) -> "QuadratureSet":
        samples = list(samples)
        return cls(
            np.array([s.frame_id for s in samples], dtype=np.int64),
            np.array([s.theta for s in samples], dtype=float),
            np.array([s.value for s in samples], dtype=float),
        )


def _as_batch(frames) -> FrameBatch:
    return frames if isinstance(frames, FrameBatch) else FrameBatch.from_frames(frames)


def _parabolic_peak(y_minus: float, y0: float, y_plus: float) -> float:
    denom = y_minus - 2.0 * y0 + y_plus
    if denom == 0:
        return 0.0
    return 0.5 * (y_minus - y_plus) / denom


def peak_time(signal: np.ndarray, sample_period: float) -> float:
    """Sub-sample location of the maximum of ``signal`` in seconds."""
    i = int(np.argmax(signal))
    L = len(signal)
    d = _parabolic_peak(signal[(i - 1) % L], signal[i], signal[(i + 1) % L])
    return (i + d) * sample_period


def shift_linear(x: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Circularly advance rows of ``x`` by ``shift`` samples (out[t] = x[t + s]).

    Fractional parts use linear interpolation between neighbours.
    """
    L = x.shape[-1]
    base = np.floor(shift).astype(np.int64)
    frac = (shift - base)[:, None]
    idx = (np.arange(L)[None, :] + base[:, None]) % L
    rows = np.arange(x.shape[0])[:, None]
    return (1.0 - frac) * x[rows, idx] + frac * x[rows, (idx + 1) % L]


def _template_offsets(refs: np.ndarray, template: np.ndarray) -> np.ndarray:
    L = refs.shape[1]
    # c[s] = sum_t ref[t] template[t - s]
    corr = np.fft.irfft(np.fft.rfft(refs, axis=1) * np.conj(np.fft.rfft(template))[None, :], n=L, axis=1)
    i = np.argmax(corr, axis=1)
    rows = np.arange(len(refs))
    ym, y0, yp = corr[rows, (i - 1) % L], corr[rows, i], corr[rows, (i + 1) % L]
    denom = ym - 2.0 * y0 + yp
    frac = np.where(denom != 0, 0.5 * (ym - yp) / np.where(denom != 0, denom, 1.0), 0.0)
    s = i + frac
    return np.where(s > L / 2, s - L, s)


def _chunked(n: int, threads: int):
    return [np.arange(a, min(a + PCA_CHUNK, n)) for a in range(0, n, PCA_CHUNK)], max(1, threads)


def _map_chunks(fn, n: int, threads: int):
    chunks, workers = _chunked(n, threads)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def align_frames(frames, threads: int = 1) -> AlignedFrameSet:
    """Correct per-frame timing against the pulse reference.

    Each reference is cross-correlated with the mean reference, the peak
    is refined by a 3-point parabola, and the signal trace is shifted so
    its pulse lands on the template position.
    """
    batch = _as_batch(frames)
    if len(batch) < 2:
        raise AnalysisError("alignment needs at least 2 frames")
    refs = np.asarray(batch.references, dtype=float)
    span = refs.max(axis=1) - refs.min(axis=1)
    if np.any(span <= 0):
        raise AnalysisError(f"flat reference trace in frame {int(batch.frame_ids[np.argmin(span)])}")
    template = refs.mean(axis=0)
    dt = batch.sample_period
    N, L = refs.shape
    offsets = np.empty(N)
    traces = np.empty((N, L))
    aligned_refs = np.empty((N, L))

    def work(idx):
        off = _template_offsets(refs[idx], template)
        offsets[idx] = off
        traces[idx] = shift_linear(np.asarray(batch.traces[idx], dtype=float), off)
        aligned_refs[idx] = shift_linear(refs[idx], off)

    _map_chunks(work, N, threads)
    center = peak_time(template, dt)
    return AlignedFrameSet(
        frame_ids=np.asarray(batch.frame_ids).astype(np.int64),
        herald_times=np.asarray(batch.herald_times, dtype=float).copy(),
        traces=traces,
        references=aligned_refs,
        sample_period=dt,
        alignment_offsets=offsets * dt,
        pulse_times=center + offsets * dt,
        template_center=center,
    )


def herald_pulse_delays(frames: AlignedFrameSet) -> np.ndarray:
    """Herald-minus-pulse time with the median (fixed cable delay) removed."""
    d = frames.herald_times - frames.pulse_times
    return d - np.median(d)


def reject_dark_frames(frames: AlignedFrameSet, window: float, max_fraction: float = 0.5) -> AlignedFrameSet:
    """Drop frames whose herald is more than ``window`` away from the pulse."""
    if not window > 0:
        raise AnalysisError("rejection window must be positive")
    keep = np.abs(herald_pulse_delays(frames)) <= window
    dropped = int(len(keep) - keep.sum())
    if dropped > max_fraction * len(keep):
        raise AnalysisError(
            f"window of {window * 1e12:.1f} ps rejects {dropped} of {len(keep)} frames; window too small"
        )
    return frames.subset(keep, dropped)


def default_roi(frames: AlignedFrameSet, pulse_fwhm: float) -> slice:
    dt = frames.sample_period
    c = frames.template_center / dt
    half = 4.0 * pulse_fwhm / dt
    lo, hi = int(math.floor(c - half)), int(math.ceil(c + half)) + 1
    return slice(max(lo, 0), min(hi, frames.trace_length))


def off_pulse_roi(frames: AlignedFrameSet, roi: slice, shift: float = SHOT_NOISE_SHIFT) -> slice | None:
    """Window of the same size ``shift`` away from the pulse, or None if it does not fit."""
    n = int(round(shift / frames.sample_period))
    for s in (n, -n):
        if roi.start + s >= 0 and roi.stop + s <= frames.trace_length:
            return slice(roi.start + s, roi.stop + s)
    return None


@dataclass
class ModeSpectrum:
    eigenvalues: np.ndarray  # descending
    leading_vector: np.ndarray
    roi: slice

    @property
    def relative_gap(self) -> float:
        return float((self.eigenvalues[0] - self.eigenvalues[1]) / self.eigenvalues[0])

    @property
    def leading_to_median(self) -> float:
        return float(self.eigenvalues[0] / np.median(self.eigenvalues))


def second_moment(traces: np.ndarray, roi: slice, center: bool = False, threads: int = 1) -> np.ndarray:
    """Mean outer product over frames, summed chunk by chunk in fixed order."""
    X = traces[:, roi]
    mean = X.mean(axis=0) if center else None

    def part(idx):
        xc = np.asarray(X[idx], dtype=float)
        if mean is not None:
            xc = xc - mean
        return xc.T @ xc

    parts = _map_chunks(part, len(X), threads)
    M = parts[0]
    for p in parts[1:]:
        M = M + p
    return M / len(X)


def mode_spectrum(frames: AlignedFrameSet, roi: slice, center: bool = False, threads: int = 1) -> ModeSpectrum:
    M = second_moment(frames.traces, roi, center=center, threads=threads)
    w, v = np.linalg.eigh(M)
    return ModeSpectrum(eigenvalues=w[::-1].copy(), leading_vector=v[:, -1].copy(), roi=roi)


def estimate_mode_pca(
    frames: AlignedFrameSet,
    roi: slice | None = None,
    pulse_fwhm: float = 74e-12,
    center: bool = False,
    min_gap: float = 0.01,
    threads: int = 1,
) -> TemporalMode:
    """Leading eigenvector of the frame second-moment matrix over ``roi``."""
    if len(frames) < 100:
        raise AnalysisError(f"PCA needs at least 100 frames, got {len(frames)}")
    roi = default_roi(frames, pulse_fwhm) if roi is None else roi
    if not (0 <= roi.start < roi.stop <= frames.trace_length) or roi.stop - roi.start < 2:
        raise AnalysisError(f"ROI {roi} is not inside the trace")
    spectrum = mode_spectrum(frames, roi, center=center, threads=threads)
    if spectrum.relative_gap < min_gap:
        raise DegenerateModeError(
            f"leading PCA eigenvalue not separated: relative gap {spectrum.relative_gap:.4f},"
            f" leading/median {spectrum.leading_to_median:.3f}"
        )
    # Colored vacuum noise alone can show a gap; require excess over an off-pulse window.
    off_roi = off_pulse_roi(frames, roi)
    if off_roi is not None:
        off = mode_spectrum(frames, off_roi, center=center, threads=threads)
        excess = spectrum.eigenvalues[0] / off.eigenvalues[0]
        if excess < 1.0 + 3.0 * math.sqrt(4.0 / len(frames)):
            raise DegenerateModeError(
                f"leading PCA eigenvalue is not above vacuum: {excess:.3f} x the off-pulse leading eigenvalue"
            )
    f = np.zeros(frames.trace_length)
    v = spectrum.leading_vector
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    f[roi] = v
    return TemporalMode.from_samples(f, frames.sample_period)


def mode_fwhm(mode: TemporalMode) -> float:
    """Full width at half maximum of |f(t)|, linear interpolation at the edges."""
    a = np.abs(mode.samples)
    i = int(np.argmax(a))
    half = 0.5 * a[i]
    left = i
    while left > 0 and a[left - 1] >= half:
        left -= 1
    right = i
    while right < len(a) - 1 and a[right + 1] >= half:
        right += 1
    if left == 0 or right == len(a) - 1:
        raise AnalysisError("half-maximum crossing not found inside the trace")
    tl = left - (a[left] - half) / (a[left] - a[left - 1])
    tr = right + (a[right] - half) / (a[right] - a[right + 1])
    return float((tr - tl) * mode.sample_period)


def project_quadratures(
    frames: AlignedFrameSet,
    mode: TemporalMode,
    thetas: np.ndarray | None = None,
    seed: int = 0,
) -> QuadratureSet:
    """x_k = sum_t f(t) trace_k(t) dt for every frame.

    Without recorded LO phases, phases are drawn uniformly (the LO is not
    locked) from the ``phase`` substream, indexed by frame id.
    """
    if len(mode) != frames.trace_length:
        raise AnalysisError(f"mode has {len(mode)} samples, traces have {frames.trace_length}")
    values = frames.traces @ mode.samples * frames.sample_period
    if thetas is None:
        thetas = np.array([substream(seed, "phase", int(k)).uniform(0.0, 2.0 * math.pi) for k in frames.frame_ids])
    return QuadratureSet(frames.frame_ids.copy(), np.asarray(thetas, dtype=float), values)


@dataclass
class ShotNoiseCalibration:
    scale: float
    shot_variance: float
    check_variance: float
    ratio: float  # check / shot
    ratio_stderr: float

    @property
    def ratio_z(self) -> float:
        return (self.ratio - 1.0) / self.ratio_stderr


def _variance_and_stderr(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    v = float(np.var(x, ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    return v, math.sqrt(max(m4 - v * v, 0.0) / n)


def calibrate_shot_noise(
    frames: AlignedFrameSet,
    mode: TemporalMode,
    shift: float = SHOT_NOISE_SHIFT,
    check_shift: float = 200e-12,
) -> ShotNoiseCalibration:
    """Scale factor that puts the shifted-mode (vacuum) variance at 1/2.

    Also compares the variance at ``check_shift`` with the reference one.
    """
    dt = frames.sample_period
    shot = frames.traces @ mode.shifted(shift).samples * dt
    check = frames.traces @ mode.shifted(check_shift).samples * dt
    v_shot, se_shot = _variance_and_stderr(shot)
    v_check, se_check = _variance_and_stderr(check)
    if v_shot <= 0:
        raise AnalysisError("shot-noise variance is zero")
    ratio = v_check / v_shot
    ratio_se = ratio * math.hypot(se_shot / v_shot, se_check / v_check)
    return ShotNoiseCalibration(
        scale=math.sqrt(0.5 / v_shot),
        shot_variance=v_shot,
        check_variance=v_check,
        ratio=ratio,
        ratio_stderr=ratio_se,
    )


@dataclass
class AnalysisResult:
    quadratures: QuadratureSet  # calibrated
    mode: TemporalMode
    fwhm: float
    calibration: ShotNoiseCalibration
    aligned_count: int
    rejected: int
    window: float

    def sidecar(self) -> dict:
        return {
            "scale": self.calibration.scale,
            "mode_fwhm_s": self.fwhm,
            "rejected": self.rejected,
            "retained": len(self.quadratures),
            "window_s": self.window,
            "shot_noise_variance": self.calibration.shot_variance,
            "check_variance_ratio": self.calibration.ratio,
            "check_variance_ratio_stderr": self.calibration.ratio_stderr,
            "sample_period": self.mode.sample_period,
            "mode": self.mode.samples.tolist(),
        }


def analyze(
    frames,
    pulse_fwhm: float = 74e-12,
    jitter_sigma: float = 30e-12,
    window: float | None = None,
    mode: TemporalMode | None = None,
    thetas: np.ndarray | None = None,
    seed: int = 0,
    threads: int = 1,
) -> AnalysisResult:
    """Full chain from raw frames to calibrated quadratures."""
    aligned = align_frames(frames, threads=threads)
    if window is None:
        window = 3.0 * jitter_sigma if jitter_sigma > 0 else math.inf
    kept = reject_dark_frames(aligned, window) if math.isfinite(window) else aligned
    if mode is None:
        roi = default_roi(kept, pulse_fwhm)
        mode = estimate_mode_pca(kept, roi=roi, threads=threads)
    if thetas is not None:
        lookup = dict(zip(np.asarray(thetas[0]).tolist(), np.asarray(thetas[1]).tolist()))
        th = np.array([lookup[int(k)] for k in kept.frame_ids])
    else:
        th = None
    raw = project_quadratures(kept, mode, thetas=th, seed=seed)
    cal = calibrate_shot_noise(kept, mode)
    return AnalysisResult(
        quadratures=raw.scaled(cal.scale),
        mode=mode,
        fwhm=mode_fwhm(mode),
        calibration=cal,
        aligned_count=len(aligned),
        rejected=kept.rejected_count,
        window=window,
    )

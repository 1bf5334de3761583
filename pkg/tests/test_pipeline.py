import math
from dataclasses import replace

import numpy as np
import pytest

from pulsecw.fockcore import FockDensityMatrix
from pulsecw.framesio import FrameBatch
from pulsecw.physim import (
    AcquisitionConfig,
    QuadratureSampler,
    SourceConfig,
    TemporalMode,
    gaussian_mode,
    simulate_frames,
    synthesize_frame,
)
from pulsecw.pipeline import (
    AlignedFrameSet,
    AnalysisError,
    DegenerateModeError,
    QuadratureSet,
    align_frames,
    analyze,
    calibrate_shot_noise,
    default_roi,
    estimate_mode_pca,
    herald_pulse_delays,
    mode_fwhm,
    mode_spectrum,
    project_quadratures,
    reject_dark_frames,
    shift_linear,
)

CLEAN = AcquisitionConfig(detector_bandwidth=0.0, electronic_noise_rel=0.0, jitter_sigma=0.0, dark_fraction=0.0)


def clean_batch(probs, n, seed, acq=CLEAN):
    """Frames with x_s drawn from a Fock-diagonal state, no artifacts."""
    rng = np.random.default_rng(seed)
    f = gaussian_mode(acq)
    _, xs = QuadratureSampler(FockDensityMatrix.from_diagonal(probs)).sample(rng, n)
    frames = [synthesize_frame(x, f, acq, rng, frame_id=k) for k, x in enumerate(xs)]
    return FrameBatch.from_frames(frames), xs


def unaligned(batch):
    n = len(batch)
    return AlignedFrameSet(
        frame_ids=np.asarray(batch.frame_ids), herald_times=np.asarray(batch.herald_times),
        traces=np.asarray(batch.traces), references=np.asarray(batch.references),
        sample_period=batch.sample_period, alignment_offsets=np.zeros(n),
        pulse_times=np.asarray(batch.herald_times), template_center=CLEAN.pulse_center,
    )


def delays_only(delays):
    """AlignedFrameSet carrying only herald-pulse delays (1-sample dummy traces)."""
    n = len(delays)
    z = np.zeros((n, 1))
    return AlignedFrameSet(np.arange(n), np.asarray(delays, float), z, z, 1e-12, np.zeros(n), np.zeros(n), 0.0)


@pytest.fixture(scope="module")
def vacuum_clean():
    return clean_batch([1.0], 20000, 31)


@pytest.fixture(scope="module")
def mixture_clean():
    return clean_batch([0.26, 0.74], 20000, 32)


# --- alignment ----------------------------------------------------------------


def test_shift_linear_integer_and_half():
    x = np.arange(8.0)[None, :]
    np.testing.assert_array_equal(shift_linear(x, np.array([2.0]))[0], np.roll(x[0], -2))
    np.testing.assert_allclose(shift_linear(x, np.array([0.5]))[0, :3], [0.5, 1.5, 2.5])


def test_zero_jitter_leaves_traces_unchanged(mixture_clean):
    batch, _ = mixture_clean
    sub = batch.subset(np.arange(200))
    a = align_frames(sub)
    assert np.max(np.abs(a.alignment_offsets)) < 1e-3 * CLEAN.sample_period
    np.testing.assert_allclose(a.traces, sub.traces, atol=1e-9 * np.abs(sub.traces).max())


def test_known_integer_shift_is_undone(mixture_clean):
    batch, _ = mixture_clean
    sub = batch.subset(np.arange(50))
    traces = np.array(sub.traces)
    refs = np.array(sub.references)
    traces[7] = np.roll(traces[7], 5)
    refs[7] = np.roll(refs[7], 5)
    moved = FrameBatch(sub.frame_ids, sub.herald_times, traces, refs, sub.sample_period)
    a = align_frames(moved)
    off = a.alignment_offsets / CLEAN.sample_period
    # template is the mean reference, so the other frames carry a tiny common offset
    assert off[7] - np.median(off) == pytest.approx(5.0, abs=1e-6)
    np.testing.assert_allclose(a.references[7], a.references[0], atol=1e-9)
    expected = shift_linear(np.asarray(sub.traces[7:8]), off[:1])[0]
    np.testing.assert_allclose(a.traces[7], expected, atol=1e-9 * np.abs(traces).max())


def test_alignment_residual_below_4ps(small_batch):
    acq, batch, truth = small_batch
    a = align_frames(batch)
    err = a.pulse_times - truth.pulse_time
    resid = np.sqrt(np.mean((err - err.mean()) ** 2))
    assert resid < 4e-12


def test_alignment_is_idempotent(small_batch):
    _, batch, _ = small_batch
    sub = batch.subset(np.arange(500))
    a = align_frames(sub)
    again = align_frames(FrameBatch(a.frame_ids, a.herald_times, a.traces, a.references, a.sample_period))
    assert np.max(np.abs(again.alignment_offsets - again.alignment_offsets.mean())) < 0.05 * CLEAN.sample_period


def test_alignment_thread_independent(small_batch):
    _, batch, _ = small_batch
    a = align_frames(batch, threads=1)
    b = align_frames(batch, threads=3)
    np.testing.assert_array_equal(a.traces, b.traces)


def test_alignment_needs_two_frames(small_batch):
    _, batch, _ = small_batch
    with pytest.raises(AnalysisError):
        align_frames(batch.subset(np.arange(1)))


# --- dark-count rejection --------------------------------------------------------


def test_gaussian_tail_rejection():
    d = np.random.default_rng(40).normal(0, 30e-12, 10**6)
    out = reject_dark_frames(delays_only(d), 90e-12)
    assert out.rejected_count / 1e6 == pytest.approx(0.0027, abs=0.0003)


def test_dark_population_rejection():
    rng = np.random.default_rng(41)
    n = 10**6
    dark = rng.random(n) < 0.2
    d = np.where(dark, rng.uniform(-0.4e-9, 0.4e-9, n), rng.normal(0, 30e-12, n))
    out = reject_dark_frames(delays_only(d), 90e-12)
    expected = 0.2 * (1 - 0.18 / 0.8) + 0.8 * 0.0027
    assert out.rejected_count / n == pytest.approx(expected, abs=0.003)


def test_rejection_monotone_in_window():
    d = np.random.default_rng(42).normal(0, 30e-12, 10**4)
    s = delays_only(d)
    counts = [reject_dark_frames(s, w).rejected_count for w in (30e-12, 60e-12, 90e-12, 200e-12, np.inf)]
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 0


def test_rejection_window_errors():
    s = delays_only(np.random.default_rng(43).normal(0, 30e-12, 1000))
    with pytest.raises(AnalysisError):
        reject_dark_frames(s, 1e-13)
    with pytest.raises(AnalysisError):
        reject_dark_frames(s, 0.0)


def test_delays_remove_median():
    s = delays_only(np.array([5.0, 6.0, 7.0]))
    np.testing.assert_array_equal(herald_pulse_delays(s), [-1.0, 0.0, 1.0])


# --- PCA mode ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def jittered_aligned(small_batch):
    _, batch, _ = small_batch
    return reject_dark_frames(align_frames(batch), 90e-12)


def test_pca_recovers_injected_mode(jittered_aligned):
    mode = estimate_mode_pca(jittered_aligned)
    f = gaussian_mode(AcquisitionConfig())
    assert abs(mode.overlap(f)) > 0.98


def test_pca_sign_convention(jittered_aligned):
    mode = estimate_mode_pca(jittered_aligned)
    assert mode.samples[np.argmax(np.abs(mode.samples))] > 0


def test_pca_permutation_invariance(jittered_aligned):
    a = estimate_mode_pca(jittered_aligned)
    perm = np.random.default_rng(44).permutation(len(jittered_aligned))
    b = estimate_mode_pca(jittered_aligned.subset(perm, 0))
    np.testing.assert_allclose(a.samples, b.samples, atol=1e-10 * np.abs(a.samples).max())


def test_pca_vacuum_is_degenerate():
    acq = AcquisitionConfig()
    batch, _ = simulate_frames(SourceConfig(eta_signal=1e-12), acq, np.arange(2000), 45)
    with pytest.raises(DegenerateModeError):
        estimate_mode_pca(reject_dark_frames(align_frames(batch), 90e-12))


def test_vacuum_spectrum_is_flat():
    acq = CLEAN
    batch, _ = simulate_frames(SourceConfig(eta_signal=1e-12), acq, np.arange(100000), 46)
    frames = unaligned(batch)
    spectrum = mode_spectrum(frames, default_roi(frames, acq.pulse_fwhm))
    assert spectrum.leading_to_median < 1.1


def test_pca_needs_100_frames(jittered_aligned):
    with pytest.raises(AnalysisError):
        estimate_mode_pca(jittered_aligned.subset(np.arange(50), 0))


def test_pca_roi_outside_trace(jittered_aligned):
    with pytest.raises(AnalysisError):
        estimate_mode_pca(jittered_aligned, roi=slice(400, 700))


def test_default_roi_is_four_fwhm():
    s = delays_only(np.zeros(3))
    s = replace(s, traces=np.zeros((3, 512)), sample_period=1 / 256e9, template_center=0.6e-9)
    roi = default_roi(s, 74e-12)
    assert (roi.stop - 1 - roi.start) * s.sample_period == pytest.approx(8 * 74e-12, abs=2 / 256e9)


# --- FWHM ----------------------------------------------------------------------------


def test_fwhm_of_gaussian_mode():
    assert mode_fwhm(gaussian_mode(AcquisitionConfig())) == pytest.approx(74e-12, rel=0.01)


def test_fwhm_of_rectangle():
    f = np.zeros(512)
    f[100:120] = 1.0
    m = TemporalMode.from_samples(f, 1e-12)
    # linear interpolation puts the half-maximum crossings half a sample outside
    assert mode_fwhm(m) == pytest.approx(20e-12, abs=1e-15)


def test_fwhm_at_trace_edge():
    f = np.zeros(64)
    f[:5] = 1.0
    with pytest.raises(AnalysisError):
        mode_fwhm(TemporalMode.from_samples(f, 1e-12))


# --- projection and calibration ---------------------------------------------------------


def test_projection_identity(mixture_clean):
    batch, xs = mixture_clean
    q = project_quadratures(unaligned(batch), gaussian_mode(CLEAN), thetas=np.zeros(len(batch)))
    np.testing.assert_allclose(q.values, xs, atol=1e-10)


def test_projection_vacuum_variance(vacuum_clean):
    batch, _ = vacuum_clean
    q = project_quadratures(unaligned(batch), gaussian_mode(CLEAN))
    assert np.var(q.values) == pytest.approx(0.5, rel=0.02)


def test_projection_mixture_variance(mixture_clean):
    batch, _ = mixture_clean
    q = project_quadratures(unaligned(batch), gaussian_mode(CLEAN))
    assert np.var(q.values) == pytest.approx(1.24, rel=0.03)


def test_projection_is_linear(mixture_clean, vacuum_clean):
    a = unaligned(mixture_clean[0])
    b = unaligned(vacuum_clean[0])
    f = gaussian_mode(CLEAN)
    combo = replace(a, traces=2.5 * a.traces - 0.7 * b.traces)
    pa, pb, pc = (project_quadratures(s, f).values for s in (a, b, combo))
    np.testing.assert_allclose(pc, 2.5 * pa - 0.7 * pb, atol=1e-9)


def test_projection_phases_from_substream(mixture_clean):
    s = unaligned(mixture_clean[0])
    f = gaussian_mode(CLEAN)
    q1 = project_quadratures(s, f, seed=3)
    q2 = project_quadratures(s.subset(np.arange(10, 20), 0), f, seed=3)
    np.testing.assert_array_equal(q1.thetas[10:20], q2.thetas)
    assert np.all((q1.thetas >= 0) & (q1.thetas < 2 * math.pi))


def test_projection_length_mismatch(mixture_clean):
    with pytest.raises(AnalysisError):
        project_quadratures(unaligned(mixture_clean[0]), TemporalMode.from_samples(np.ones(10), 1e-12))


def test_calibration_scale_is_one_for_vacuum_units(mixture_clean):
    s = unaligned(mixture_clean[0])
    cal = calibrate_shot_noise(s, gaussian_mode(CLEAN))
    assert cal.scale == pytest.approx(1.0, rel=0.02)
    assert abs(cal.ratio_z) < 3


def test_calibration_tracks_gain(mixture_clean):
    s = unaligned(mixture_clean[0])
    f = gaussian_mode(CLEAN)
    a = calibrate_shot_noise(s, f)
    b = calibrate_shot_noise(replace(s, traces=2.0 * s.traces), f)
    assert b.scale == pytest.approx(0.5 * a.scale, rel=1e-12)


def test_calibration_ratio_consistent_with_one(jittered_aligned):
    cal = calibrate_shot_noise(jittered_aligned, estimate_mode_pca(jittered_aligned))
    assert abs(cal.ratio - 1.0) <= 3 * cal.ratio_stderr


# --- full chain ------------------------------------------------------------------------


def test_analyze_small_run(small_batch):
    acq, batch, truth = small_batch
    res = analyze(batch, thetas=(truth.frame_id, truth.theta))
    assert res.aligned_count == len(batch)
    assert res.rejected == len(batch) - len(res.quadratures)
    assert 0.0 < res.rejected / len(batch) < 0.06
    lookup = dict(zip(truth.frame_id, truth.theta))
    assert all(lookup[k] == th for k, th in zip(res.quadratures.frame_ids, res.quadratures.thetas))
    side = res.sidecar()
    assert side["retained"] + side["rejected"] == len(batch)
    assert side["window_s"] == pytest.approx(90e-12)


def test_analyze_without_jitter_keeps_everything(mixture_clean):
    res = analyze(mixture_clean[0].subset(np.arange(2000)), jitter_sigma=0.0)
    assert res.rejected == 0 and math.isinf(res.window)


def test_quadrature_csv_roundtrip(tmp_path):
    q = QuadratureSet(np.arange(3), np.array([0.1, 2.0, 6.0]), np.array([-0.5, 1e-17, 3.25]))
    q.write_csv(tmp_path / "q.csv")
    back = QuadratureSet.read_csv(tmp_path / "q.csv")
    np.testing.assert_array_equal(back.values, q.values)
    np.testing.assert_array_equal(back.thetas, q.thetas)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        QuadratureSet.read_csv(tmp_path / "bad.csv")

"""Maximum-likelihood density-matrix reconstruction (iterative R rho R).

Samples are histogrammed into (phase sector, quadrature bin) cells, each
cell carrying the bin-width-weighted quadrature projector as its POVM
element.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fockcore import FockDensityMatrix, fidelity_to_fock, fock_wavefunctions, wigner_origin
from .rng import substream

PROB_FLOOR = 1e-300


class TomographyError(ValueError):
    pass


class CutoffTooSmallError(TomographyError):
    pass


@dataclass(frozen=True)
class TomographyOptions:
    cutoff: int = 10
    bin_width: float = 0.05
    x_range: tuple[float, float] = (-6.0, 6.0)
    theta_bins: int = 12
    max_iterations: int = 2000
    ll_tolerance: float = 1e-10
    bootstrap_resamples: int = 200

    def __post_init__(self):
        if self.cutoff < 1:
            raise ValueError("cutoff must be at least 1")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        lo, hi = self.x_range
        # 5 vacuum standard deviations on each side
        if lo > -5 * math.sqrt(0.5) or hi < 5 * math.sqrt(0.5):
            raise ValueError(f"x_range {self.x_range} must cover at least 5 vacuum standard deviations")
        if self.theta_bins < 1 or self.max_iterations < 1:
            raise ValueError("theta_bins and max_iterations must be positive")

    def x_edges(self) -> np.ndarray:
        lo, hi = self.x_range
        n = int(round((hi - lo) / self.bin_width))
        return lo + self.bin_width * np.arange(n + 1)

    def to_dict(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "bin_width": self.bin_width,
            "x_range": list(self.x_range),
            "theta_bins": self.theta_bins,
            "max_iterations": self.max_iterations,
            "ll_tolerance": self.ll_tolerance,
            "bootstrap_resamples": self.bootstrap_resamples,
        }


@dataclass
class BinnedData:
    """Non-empty histogram cells with the POVM vector of each cell.

    The POVM element of cell j is outer(vectors[j], vectors[j].conj()).
    """

    vectors: np.ndarray  # (cells, dim) complex
    counts: np.ndarray  # (cells,)
    dropped: int = 0
    # sum of the POVM elements of every cell in range, empty or not; None means identity
    total_povm: np.ndarray | None = None

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.total

    @classmethod
    def from_povms(cls, povms, counts) -> "BinnedData":
        """Build from explicit rank-one PSD matrices (toy problems, tests)."""
        vecs = []
        for P in povms:
            w, v = np.linalg.eigh(np.asarray(P, dtype=complex))
            if np.sum(w > 1e-12 * max(w.max(), 1e-300)) > 1:
                raise TomographyError("POVM elements must be rank one")
            vecs.append(v[:, -1] * math.sqrt(max(w[-1], 0.0)))
        return cls(np.array(vecs), np.asarray(counts, dtype=float))


def _values_thetas(samples):
    if hasattr(samples, "values") and hasattr(samples, "thetas"):
        return np.asarray(samples.values, dtype=float), np.asarray(samples.thetas, dtype=float)
    samples = list(samples)
    return (np.array([s.value for s in samples], dtype=float),
            np.array([s.theta for s in samples], dtype=float))


def bin_samples(values, thetas, opts: TomographyOptions) -> BinnedData:
    values = np.asarray(values, dtype=float)
    thetas = np.mod(np.asarray(thetas, dtype=float), 2.0 * math.pi)
    edges = opts.x_edges()
    nx = len(edges) - 1
    ix = np.floor((values - edges[0]) / opts.bin_width).astype(np.int64)
    inside = (ix >= 0) & (ix < nx)
    it = np.minimum((thetas / (2.0 * math.pi) * opts.theta_bins).astype(np.int64), opts.theta_bins - 1)
    cell = it[inside] * nx + ix[inside]
    counts = np.bincount(cell, minlength=opts.theta_bins * nx)
    nz = np.flatnonzero(counts)
    if len(nz) < 2:
        raise TomographyError("degenerate histogram: all samples fall into one bin")
    x_c = edges[:-1] + 0.5 * opts.bin_width
    th_c = (np.arange(opts.theta_bins) + 0.5) * 2.0 * math.pi / opts.theta_bins
    cells = np.arange(opts.theta_bins * nx)
    psi = fock_wavefunctions(opts.cutoff, x_c[cells % nx])  # (dim, cells)
    phase = np.exp(1j * np.outer(th_c[cells // nx], np.arange(opts.cutoff + 1)))
    all_vectors = math.sqrt(opts.bin_width) * psi.T * phase
    G = all_vectors.T @ all_vectors.conj()
    return BinnedData(vectors=all_vectors[nz], counts=counts[nz].astype(float),
                      dropped=int((~inside).sum()), total_povm=0.5 * (G + G.conj().T))


def _probabilities(rho: np.ndarray, V: np.ndarray) -> np.ndarray:
    return ((V.conj() @ rho) * V).sum(axis=1).real


def log_likelihood(rho: FockDensityMatrix | np.ndarray, data: BinnedData, return_floored: bool = False):
    """sum_j f_j ln(Tr(Pi_j rho) / Tr(G rho)) with f_j the relative frequencies.

    G is the sum of all in-range POVM elements; the division conditions
    on the sample landing inside the histogram range.
    """
    r = rho.elements if isinstance(rho, FockDensityMatrix) else rho
    p = _probabilities(r, data.vectors)
    floored = int(np.sum(p < PROB_FLOOR))
    ll = _ll_from_probs(p, data.frequencies, _in_range_probability(r, data))
    return (ll, floored) if return_floored else ll


def _in_range_probability(rho: np.ndarray, data: BinnedData) -> float:
    if data.total_povm is None:
        return 1.0
    return float(np.trace(data.total_povm @ rho).real)


def _ll_from_probs(p: np.ndarray, freqs: np.ndarray, norm: float = 1.0) -> float:
    return float(np.dot(freqs, np.log(np.maximum(p, PROB_FLOOR)))) - math.log(norm)


def _r_operator(p: np.ndarray, data: BinnedData, freqs: np.ndarray) -> np.ndarray:
    w = freqs / np.maximum(p, PROB_FLOOR)
    V = data.vectors
    return V.T @ (w[:, None] * V.conj())


def rrhor_step(rho: np.ndarray, R: np.ndarray, dilution: float | None = None) -> np.ndarray:
    """One (optionally diluted) R rho R update, renormalized to unit trace."""
    if dilution is not None:
        R = (np.eye(len(R)) + dilution * R) / (1.0 + dilution)
    out = R @ rho @ R.conj().T
    out = 0.5 * (out + out.conj().T)
    return out / out.trace().real


def iterate_rrhor(
    data: BinnedData,
    rho0: np.ndarray,
    max_iterations: int,
    ll_tolerance: float,
):
    """Run R rho R to convergence.

    With an incomplete POVM (total G != identity) the update is
    G^-1 R rho R G^-1, whose fixed point is the conditional maximum.
    A plain step that would lower the likelihood is replaced by a diluted
    step (I + eps R) rho (I + eps R) with eps halved until it does not.
    Returns (rho, ll_trace, converged).
    """
    freqs = data.frequencies
    V = data.vectors
    G_inv = None if data.total_povm is None else np.linalg.inv(data.total_povm)
    rho = rho0
    p = _probabilities(rho, V)
    ll = _ll_from_probs(p, freqs, _in_range_probability(rho, data))
    trace = [ll]
    converged = False
    for _ in range(max_iterations):
        R = _r_operator(p, data, freqs)
        if G_inv is not None:
            R = G_inv @ R
        new = rrhor_step(rho, R)
        p_new = _probabilities(new, V)
        ll_new = _ll_from_probs(p_new, freqs, _in_range_probability(new, data))
        eps = 1.0
        while ll_new < ll and eps > 1e-12:
            new = rrhor_step(rho, R, dilution=eps)
            p_new = _probabilities(new, V)
            ll_new = _ll_from_probs(p_new, freqs, _in_range_probability(new, data))
            eps *= 0.5
        if ll_new < ll:
            new, p_new, ll_new = rho, p, ll
        rho, p = new, p_new
        trace.append(ll_new)
        if abs(ll_new - ll) <= ll_tolerance * abs(ll):
            converged = True
            ll = ll_new
            break
        ll = ll_new
    return rho, np.array(trace), converged


@dataclass
class TomographyResult:
    rho: FockDensityMatrix
    iterations: int
    final_log_likelihood: float
    converged: bool
    diagnostics: np.ndarray = field(repr=False)  # log-likelihood per iteration, starting point first
    n_samples: int = 0
    dropped: int = 0
    floored: int = 0

    def convergence_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_log_likelihood": self.final_log_likelihood,
            "converged": self.converged,
            "n_samples": self.n_samples,
            "dropped_out_of_range": self.dropped,
            "floored_probabilities": self.floored,
            "log_likelihood_trace": self.diagnostics.tolist(),
        }


def reconstruct(samples, opts: TomographyOptions = TomographyOptions()) -> TomographyResult:
    """Maximum-likelihood density matrix from calibrated quadrature samples."""
    values, thetas = _values_thetas(samples)
    if len(values) < 100:
        raise TomographyError(f"need at least 100 samples, got {len(values)}")
    data = bin_samples(values, thetas, opts)
    return reconstruct_binned(data, opts, n_samples=len(values))


def reconstruct_binned(data: BinnedData, opts: TomographyOptions, n_samples: int = 0) -> TomographyResult:
    dim = data.vectors.shape[1]
    rho, trace, converged = iterate_rrhor(data, np.eye(dim) / dim, opts.max_iterations, opts.ll_tolerance)
    rho = FockDensityMatrix(rho).normalized()
    nbar = rho.mean_photon_number()
    if nbar > opts.cutoff - 2:
        raise CutoffTooSmallError(f"mean photon number {nbar:.3f} is within 2 of cutoff {opts.cutoff}")
    ll, floored = log_likelihood(rho, data, return_floored=True)
    return TomographyResult(
        rho=rho,
        iterations=len(trace) - 1,
        final_log_likelihood=ll,
        converged=converged,
        diagnostics=trace,
        n_samples=n_samples,
        dropped=data.dropped,
        floored=floored,
    )


def derived_metrics(rho: FockDensityMatrix) -> dict:
    diag = rho.diagonal
    out = {
        "photon_number_distribution": diag.tolist(),
        "fidelity_1": fidelity_to_fock(rho, 1),
        "wigner_origin": wigner_origin(rho),
        "mean_photon_number": rho.mean_photon_number(),
    }
    for n in range(min(3, rho.dim)):
        out[f"p{n}"] = float(diag[n])
    return out


def _metric_fn(metric):
    if callable(metric):
        return metric
    if metric == "wigner_origin":
        return wigner_origin
    if metric == "diag":
        return lambda rho: rho.diagonal
    if isinstance(metric, str) and metric.startswith("fidelity_"):
        n = int(metric.split("_", 1)[1])
        return lambda rho: fidelity_to_fock(rho, n)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class BootstrapResult:
    estimate: np.ndarray | float
    stderr: np.ndarray | float
    values: np.ndarray
    failed: int


def bootstrap_metric(
    samples,
    metric="wigner_origin",
    opts: TomographyOptions = TomographyOptions(),
    resamples: int | None = None,
    seed: int = 0,
    threads: int = 1,
) -> BootstrapResult:
    """Resample-with-replacement error bar of a state metric.

    Resample b draws its indices from the ``bootstrap`` substream b, so
    results do not depend on ``threads``.  Non-converged resamples are
    excluded and counted.
    """
    B = opts.bootstrap_resamples if resamples is None else resamples
    if B < 2:
        raise TomographyError("bootstrap needs at least 2 resamples for a standard error")
    values, thetas = _values_thetas(samples)
    N = len(values)
    if N < 1000:
        raise TomographyError(f"bootstrap needs at least 1000 samples, got {N}")
    fn = _metric_fn(metric)

    def one(b):
        idx = substream(seed, "bootstrap", b).integers(0, N, N)
        res = reconstruct_binned(bin_samples(values[idx], thetas[idx], opts), opts, n_samples=N)
        return np.asarray(fn(res.rho), dtype=float) if res.converged else None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, range(B)))
    else:
        out = [one(b) for b in range(B)]
    good = [o for o in out if o is not None]
    failed = B - len(good)
    if len(good) < 2:
        raise TomographyError(f"only {len(good)} of {B} resamples converged")
    arr = np.array(good)
    est, se = arr.mean(axis=0), arr.std(axis=0, ddof=1)
    if arr.ndim == 1:
        est, se = float(est), float(se)
    return BootstrapResult(estimate=est, stderr=se, values=arr, failed=failed)

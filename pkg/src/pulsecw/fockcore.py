"""Single-mode Fock-basis linear algebra.

Conventions are fixed project-wide: hbar = 1, x = (a + a^dag)/sqrt(2),
p = (a - a^dag)/(sqrt(2) i), so the vacuum quadrature variance is 1/2.
The rotated quadrature eigenstate obeys <n|x, theta> = exp(i n theta) psi_n(x).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import eval_genlaguerre, gammaln

HBAR = 1.0
VACUUM_VARIANCE = 0.5
MAX_WAVEFUNCTION_N = 200
PSD_TOLERANCE = 1e-10


class StateError(ValueError):
    """Raised when a density matrix violates its invariants."""


@dataclass(frozen=True)
class FockDensityMatrix:
    """Truncated density operator on photon numbers 0..cutoff.

    The stored matrix is made exactly Hermitian on construction and is
    read-only afterwards.
    """

    elements: np.ndarray

    def __post_init__(self):
        arr = np.array(self.elements, dtype=np.complex128)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise StateError(f"density matrix must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise StateError("density matrix has non-finite entries")
        asym = np.max(np.abs(arr - arr.conj().T))
        if asym > 1e-8 * max(1.0, np.max(np.abs(arr))):
            raise StateError(f"density matrix is not Hermitian (max asymmetry {asym:.3g})")
        arr = 0.5 * (arr + arr.conj().T)
        arr.setflags(write=False)
        object.__setattr__(self, "elements", arr)

    @property
    def cutoff(self) -> int:
        return self.elements.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.elements.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return self.elements.diagonal().real.copy()

    def trace(self) -> float:
        return float(self.elements.trace().real)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.elements)[0])

    def is_diagonal(self, tol: float = 1e-12) -> bool:
        off = self.elements - np.diag(self.elements.diagonal())
        return bool(np.max(np.abs(off), initial=0.0) < tol)

    def check(self, trace_tol: float = 1e-12, psd_tol: float = PSD_TOLERANCE) -> None:
        """Raise StateError unless the matrix is unit-trace and PSD."""
        if abs(self.trace() - 1.0) > trace_tol:
            raise StateError(f"trace {self.trace():.15g} differs from 1")
        lam = self.min_eigenvalue()
        if lam < -psd_tol:
            raise StateError(f"negative eigenvalue {lam:.3g}")

    def normalized(self) -> "FockDensityMatrix":
        return FockDensityMatrix(self.elements / self.trace())

    def mean_photon_number(self) -> float:
        return float(np.dot(np.arange(self.dim), self.diagonal))

    # construction helpers

    @classmethod
    def fock(cls, n: int, cutoff: int) -> "FockDensityMatrix":
        if not 0 <= n <= cutoff:
            raise StateError(f"photon number {n} outside 0..{cutoff}")
        rho = np.zeros((cutoff + 1, cutoff + 1), dtype=np.complex128)
        rho[n, n] = 1.0
        return cls(rho)

    @classmethod
    def vacuum(cls, cutoff: int) -> "FockDensityMatrix":
        return cls.fock(0, cutoff)

    @classmethod
    def from_diagonal(cls, probs, cutoff: int | None = None) -> "FockDensityMatrix":
        probs = np.asarray(probs, dtype=float)
        dim = len(probs) if cutoff is None else cutoff + 1
        if dim < len(probs):
            raise StateError("diagonal longer than cutoff allows")
        rho = np.zeros((dim, dim), dtype=np.complex128)
        rho[np.arange(len(probs)), np.arange(len(probs))] = probs
        return cls(rho)

    @classmethod
    def maximally_mixed(cls, cutoff: int) -> "FockDensityMatrix":
        return cls(np.eye(cutoff + 1) / (cutoff + 1))

    # serialization

    def to_json_dict(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "re": self.elements.real.tolist(),
            "im": self.elements.imag.tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "FockDensityMatrix":
        try:
            re = np.asarray(data["re"], dtype=float)
            im = np.asarray(data["im"], dtype=float)
            cutoff = int(data["cutoff"])
        except (KeyError, TypeError, ValueError) as exc:
            raise StateError(f"malformed density-matrix record: {exc}") from exc
        if re.shape != (cutoff + 1, cutoff + 1) or im.shape != re.shape:
            raise StateError("density-matrix record shape does not match cutoff")
        return cls(re + 1j * im)


@dataclass(frozen=True)
class WignerGrid:
    x_axis: np.ndarray
    p_axis: np.ndarray
    values: np.ndarray  # indexed [ix, ip]

    def integral(self) -> float:
        dx = _spacing(self.x_axis)
        dp = _spacing(self.p_axis)
        return float(self.values.sum() * dx * dp)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "p", "w"])
            for i, x in enumerate(self.x_axis):
                for j, p in enumerate(self.p_axis):
                    w.writerow([repr(float(x)), repr(float(p)), repr(float(self.values[i, j]))])


def _spacing(axis: np.ndarray) -> float:
    if len(axis) < 2:
        return 1.0
    return float(axis[1] - axis[0])


def fock_wavefunctions(nmax: int, x) -> np.ndarray:
    """Return psi_0..psi_nmax evaluated at ``x`` with shape (nmax+1, *x.shape).

    Uses the normalized three-term recurrence
    psi_{n+1} = x sqrt(2/(n+1)) psi_n - sqrt(n/(n+1)) psi_{n-1}.
    """
    if nmax < 0:
        raise ValueError("photon number must be non-negative")
    if nmax > MAX_WAVEFUNCTION_N:
        raise ValueError(f"photon number {nmax} exceeds supported maximum {MAX_WAVEFUNCTION_N}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("quadrature value must be finite")
    out = np.empty((nmax + 1,) + x.shape)
    out[0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if nmax >= 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for n in range(1, nmax):
        out[n + 1] = x * math.sqrt(2.0 / (n + 1)) * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def fock_wavefunction(n: int, x):
    """Position-space wavefunction psi_n(x) of the Fock state |n>."""
    vals = fock_wavefunctions(n, x)[n]
    return float(vals) if vals.ndim == 0 else vals


def quadrature_povm_element(x: float, theta: float, cutoff: int, bin_width: float) -> np.ndarray:
    """Bin-width-weighted projector onto the rotated quadrature eigenstate |x, theta>."""
    if cutoff < 1:
        raise ValueError("cutoff must be at least 1")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    psi = fock_wavefunctions(cutoff, x)
    ket = psi * np.exp(1j * np.arange(cutoff + 1) * theta)
    return bin_width * np.outer(ket, ket.conj())


def _annihilation(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim)), k=1)


def loss_kraus(eta: float, dim: int) -> list[np.ndarray]:
    """Kraus operators of the pure-loss channel truncated to ``dim`` levels."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"transmissivity must lie in [0, 1], got {eta}")
    a = _annihilation(dim)
    eta_half = np.diag(eta ** (0.5 * np.arange(dim)))
    ops = []
    ak = np.eye(dim)
    for k in range(dim):
        coef = math.sqrt((1.0 - eta) ** k / math.factorial(k))
        ops.append(coef * eta_half @ ak)
        ak = ak @ a
    return ops


def apply_loss(rho: FockDensityMatrix, eta: float) -> FockDensityMatrix:
    """Pure-loss channel with transmissivity ``eta``."""
    ops = loss_kraus(eta, rho.dim)
    out = sum(A @ rho.elements @ A.conj().T for A in ops)
    return FockDensityMatrix(out)


def _wigner_kernel_terms(cutoff: int, x: np.ndarray, p: np.ndarray):
    """Yield (m, n, W_mn) for m >= n on a meshgrid, in (x, p) units."""
    r2 = x * x + p * p
    gauss = np.exp(-r2) / np.pi
    z = math.sqrt(2.0) * (x - 1j * p)  # 2 alpha^*
    for n in range(cutoff + 1):
        for m in range(n, cutoff + 1):
            k = m - n
            pref = (-1) ** n * math.exp(0.5 * (gammaln(n + 1) - gammaln(m + 1)))
            yield m, n, pref * z**k * gauss * eval_genlaguerre(n, k, 2.0 * r2)


def wigner(rho: FockDensityMatrix, x_axis, p_axis) -> WignerGrid:
    """Wigner function of ``rho`` on the product grid x_axis by p_axis."""
    x_axis = np.asarray(x_axis, dtype=float)
    p_axis = np.asarray(p_axis, dtype=float)
    if x_axis.size == 0 or p_axis.size == 0:
        raise ValueError("Wigner axes must be non-empty")
    X, P = np.meshgrid(x_axis, p_axis, indexing="ij")
    W = np.zeros(X.shape)
    r = rho.elements
    for m, n, kern in _wigner_kernel_terms(rho.cutoff, X, P):
        if m == n:
            W += r[m, m].real * kern.real
        elif r[m, n] != 0:
            W += 2.0 * (r[m, n] * kern).real
    return WignerGrid(x_axis, p_axis, W)


def wigner_origin(rho: FockDensityMatrix) -> float:
    """W(0, 0) = (1/pi) sum_n (-1)^n rho_nn."""
    signs = (-1.0) ** np.arange(rho.dim)
    return float(np.dot(signs, rho.diagonal) / np.pi)


def fidelity_to_fock(rho: FockDensityMatrix, n: int) -> float:
    if not 0 <= n <= rho.cutoff:
        raise ValueError(f"photon number {n} outside 0..{rho.cutoff}")
    return float(rho.elements[n, n].real)


def save_density_matrix(rho: FockDensityMatrix, path) -> None:
    Path(path).write_text(json.dumps(rho.to_json_dict()))


def load_density_matrix(path) -> FockDensityMatrix:
    return FockDensityMatrix.from_json_dict(json.loads(Path(path).read_text()))

"""Random problem instances and external matrix I/O.

Every generator is a pure function of its shape arguments, its spec objects
and an integer seed.  Independent randomness (design, features, signal,
noise, initialization) is drawn from disjoint :class:`numpy.random.SeedSequence`
streams keyed by the master seed, so regenerating with the same seed is
bit-for-bit reproducible on any platform that ships numpy's PCG64.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from homsgd.errors import InputError, MatrixFormatError

# stream identifiers for SeedSequence spawn keys
STREAM_DESIGN = 0
STREAM_FEATURES_X = 1
STREAM_FEATURES_W = 2
STREAM_BETA = 3
STREAM_NOISE = 4
STREAM_INIT = 5
STREAM_SGD = 6
STREAM_HSGD = 7
STREAM_MOMENTS = 8
STREAM_FEATURE_NOISE = 9


def make_rng(seed, *stream):
    """Generator for the sub-stream ``stream`` of master ``seed``.

    Standard normals come from ``Generator.standard_normal`` (PCG64 +
    ziggurat), which is deterministic across platforms.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise InputError("seed must be a 64-bit unsigned integer")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(s) for s in stream)))


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Covariance of Gaussian rows.

    ``kind`` is ``identity_scaled`` (payload: scalar), ``diagonal``
    (payload: eigenvalue vector) or ``dense`` (payload: PSD matrix).
    """

    kind: str
    payload: object
    dimension: int

    def __post_init__(self):
        if self.dimension < 1:
            raise InputError("covariance dimension must be positive")
        if self.kind == "identity_scaled":
            scale = float(self.payload)
            if not np.isfinite(scale) or scale < 0:
                raise InputError("identity_scaled covariance needs a finite scale >= 0")
            object.__setattr__(self, "payload", scale)
        elif self.kind == "diagonal":
            diag = np.asarray(self.payload, dtype=np.float64)
            if diag.shape != (self.dimension,):
                raise InputError(f"diagonal covariance needs {self.dimension} entries")
            if not np.isfinite(diag).all() or np.any(diag < 0):
                raise InputError("covariance is not positive semi-definite")
            object.__setattr__(self, "payload", diag)
        elif self.kind == "dense":
            mat = np.asarray(self.payload, dtype=np.float64)
            if mat.shape != (self.dimension, self.dimension):
                raise InputError(f"dense covariance needs shape ({self.dimension}, {self.dimension})")
            if not np.isfinite(mat).all() or not np.allclose(mat, mat.T, atol=1e-12):
                raise InputError("dense covariance must be finite and symmetric")
            eig = np.linalg.eigvalsh(mat)
            if eig[0] < -1e-10 * max(1.0, abs(eig[-1])):
                raise InputError("covariance is not positive semi-definite")
            object.__setattr__(self, "payload", 0.5 * (mat + mat.T))
        else:
            raise InputError(f"unknown covariance kind {self.kind!r}")

    @classmethod
    def identity_scaled(cls, dimension, scale=1.0):
        return cls("identity_scaled", scale, dimension)

    @classmethod
    def diagonal(cls, eigenvalues):
        eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        return cls("diagonal", eigenvalues, eigenvalues.shape[0])

    @classmethod
    def dense(cls, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls("dense", matrix, matrix.shape[0])

    def matrix(self):
        if self.kind == "identity_scaled":
            return self.payload * np.eye(self.dimension)
        if self.kind == "diagonal":
            return np.diag(self.payload)
        return self.payload.copy()

    def trace(self):
        if self.kind == "identity_scaled":
            return self.payload * self.dimension
        if self.kind == "diagonal":
            return float(self.payload.sum())
        return float(np.trace(self.payload))

    def sqrt(self):
        """Symmetric PSD square root."""
        if self.kind == "identity_scaled":
            return math.sqrt(self.payload) * np.eye(self.dimension)
        if self.kind == "diagonal":
            return np.diag(np.sqrt(self.payload))
        w, q = np.linalg.eigh(self.payload)
        return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T

    def rescaled(self, target_trace=1.0):
        """Copy with trace equal to ``target_trace``."""
        tr = self.trace()
        if tr <= 0:
            raise InputError("cannot rescale a zero covariance")
        factor = target_trace / tr
        if self.kind == "identity_scaled":
            return CovarianceSpec("identity_scaled", self.payload * factor, self.dimension)
        return CovarianceSpec(self.kind, self.payload * factor, self.dimension)

    def sample_rows(self, rng, count):
        """``count`` iid rows ``N(0, Sigma)``."""
        z = rng.standard_normal((count, self.dimension))
        if self.kind == "identity_scaled":
            return z * math.sqrt(self.payload)
        if self.kind == "diagonal":
            return z * np.sqrt(self.payload)
        return z @ self.sqrt()


_RELU_A = 1.0 / math.sqrt(2.0 * math.pi)
_RELU_B = math.sqrt(0.5 - 1.0 / (2.0 * math.pi))


def _tanh_scale():
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    return math.sqrt(float(weights @ np.tanh(nodes) ** 2) / math.sqrt(2.0 * math.pi))


@dataclass(frozen=True, eq=False)
class Activation:
    """Entrywise activation ``sigma(x) = (f(x) - center_a) / scale_b``.

    ``normalized_relu`` uses ``f = max(0, .)`` with analytic constants making
    ``E sigma(Z) = 0`` and ``E sigma(Z)^2 = 1``; ``tanh`` is odd, so only the
    scale is normalized; ``custom_table`` wraps a user callable ``func`` whose
    derivative growth bound ``growth = (C0, C1)`` is declared, not checked.
    """

    kind: str
    center_a: float = 0.0
    scale_b: float = 1.0
    func: Optional[Callable] = None
    name: str = ""
    growth: tuple = (1.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("normalized_relu", "tanh", "custom_table"):
            raise InputError(f"unknown activation kind {self.kind!r}")
        if self.kind == "custom_table" and self.func is None:
            raise InputError("custom_table activation needs a callable")
        if not self.scale_b > 0:
            raise InputError("activation scale_b must be positive")

    @classmethod
    def normalized_relu(cls):
        return cls("normalized_relu", _RELU_A, _RELU_B, name="normalized_relu")

    @classmethod
    def tanh(cls):
        return cls("tanh", 0.0, _tanh_scale(), name="tanh")

    @classmethod
    def custom(cls, func, name="custom", center_a=0.0, scale_b=1.0, growth=(1.0, 0.0)):
        return cls("custom_table", center_a, scale_b, func=func, name=name, growth=tuple(growth))

    @classmethod
    def identity(cls):
        return cls.custom(lambda x: x, name="identity")

    @classmethod
    def by_name(cls, name):
        if name == "normalized_relu":
            return cls.normalized_relu()
        if name == "tanh":
            return cls.tanh()
        if name == "identity":
            return cls.identity()
        raise InputError(f"unknown activation {name!r}")

    def raw(self, x):
        if self.kind == "normalized_relu":
            return np.maximum(x, 0.0)
        if self.kind == "tanh":
            return np.tanh(x)
        return np.asarray(self.func(x), dtype=np.float64)

    def __call__(self, x):
        return (self.raw(x) - self.center_a) / self.scale_b


@dataclass(frozen=True)
class GenerativeTargetSpec:
    """Energies of the generative model ``b = A beta + noise``.

    Parameters
    ----------
    signal_energy : float
        ``||beta||^2``.
    noise_energy : float
        ``||noise||^2`` (realized squared norm, not a per-entry variance).
    init_energy : float
        ``E ||x0||^2``.
    """

    signal_energy: float = 1.0
    noise_energy: float = 0.0
    init_energy: float = 0.0

    def __post_init__(self):
        for name in ("signal_energy", "noise_energy", "init_energy"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise InputError(f"{name} must be finite and >= 0")
            object.__setattr__(self, name, value)


def gaussian_design(n, d, cov, seed):
    """``A = Z Sigma^{1/2}`` with ``Z`` an ``n x d`` standard normal matrix."""
    if n < 1 or d < 1:
        raise InputError("n and d must be positive")
    if cov.dimension != d:
        raise InputError(f"covariance dimension {cov.dimension} != d={d}")
    rng = make_rng(seed, STREAM_DESIGN)
    return cov.sample_rows(rng, n)


def random_features_design(n, n0, d, cov_f, act, seed):
    """Random-features design ``A = sigma(X W / sqrt(n0))``.

    ``X`` (``n x n0``) has iid ``N(0, Sigma_f)`` rows and ``W`` (``n0 x d``)
    iid standard normal entries, drawn from disjoint seed streams.

    Returns
    -------
    (A, W, X)
    """
    if min(n, n0, d) < 1:
        raise InputError("n, n0 and d must be positive")
    if cov_f.dimension != n0:
        raise InputError(f"feature covariance dimension {cov_f.dimension} != n0={n0}")
    x = cov_f.sample_rows(make_rng(seed, STREAM_FEATURES_X), n)
    w = make_rng(seed, STREAM_FEATURES_W).standard_normal((n0, d))
    a = act(x @ w / math.sqrt(n0))
    return a, w, x


def _rescaled_normal(rng, size, energy):
    if energy == 0.0:
        return np.zeros(size)
    v = rng.standard_normal(size)
    return v * math.sqrt(energy / float(v @ v))


def generative_targets(a_matrix, spec, seed):
    """Targets ``b = A beta + noise`` with exact energies.

    ``beta`` and ``noise`` are Gaussian vectors rescaled to squared norms
    ``spec.signal_energy`` and ``spec.noise_energy``.

    Returns
    -------
    (b, beta, noise)
    """
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    if a_matrix.ndim != 2 or 0 in a_matrix.shape:
        raise InputError("a_matrix must be a non-empty 2-D array")
    n, d = a_matrix.shape
    beta = _rescaled_normal(make_rng(seed, STREAM_BETA), d, spec.signal_energy)
    noise = _rescaled_normal(make_rng(seed, STREAM_NOISE), n, spec.noise_energy)
    return a_matrix @ beta + noise, beta, noise


def random_signal(dim, energy, seed, stream=STREAM_BETA):
    """Gaussian vector of length ``dim`` rescaled to squared norm ``energy``."""
    if dim < 1:
        raise InputError("dim must be positive")
    if energy < 0:
        raise InputError("energy must be >= 0")
    return _rescaled_normal(make_rng(seed, stream), dim, float(energy))


def random_init(d, energy, seed):
    """Iid ``N(0, energy/d)`` vector, so that ``E ||x0||^2 = energy``."""
    if d < 1:
        raise InputError("d must be positive")
    if energy < 0:
        raise InputError("energy must be >= 0")
    if energy == 0:
        return np.zeros(d)
    return make_rng(seed, STREAM_INIT).standard_normal(d) * math.sqrt(energy / d)


# --------------------------------------------------------------------------
# matrix files

_BIN_HEADER = struct.Struct("<QQ")


def load_matrix(path, fmt="csv_with_header"):
    """Read a matrix written as headered CSV or raw little-endian doubles.

    CSV: the first line is a header (names ignored, count gives the number of
    columns), each following line holds comma-separated floats.  Binary: two
    little-endian ``u64`` (rows, cols) then row-major ``f64`` values.
    """
    path = Path(path)
    if fmt == "csv_with_header":
        return _load_csv(path)
    if fmt == "raw_binary_f64_row_major":
        return _load_binary(path)
    raise InputError(f"unknown matrix format {fmt!r}")


def _load_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise MatrixFormatError(f"{path}: line 1: missing header")
    ncol = len(lines[0].split(","))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != ncol:
            raise MatrixFormatError(f"{path}: line {lineno}: expected {ncol} fields, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError as exc:
            raise MatrixFormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise MatrixFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def _load_binary(path):
    raw = path.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise MatrixFormatError(f"{path}: truncated header")
    rows, cols = _BIN_HEADER.unpack_from(raw)
    expected = _BIN_HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise MatrixFormatError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_BIN_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def save_matrix(path, matrix, fmt="csv_with_header"):
    """Write ``matrix`` so that :func:`load_matrix` reads it back bit-identically."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    path = Path(path)
    if fmt == "csv_with_header":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(f"c{j}" for j in range(matrix.shape[1])) + "\n")
            for row in matrix:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    elif fmt == "raw_binary_f64_row_major":
        with open(path, "wb") as fh:
            fh.write(_BIN_HEADER.pack(*matrix.shape))
            fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    else:
        raise InputError(f"unknown matrix format {fmt!r}")

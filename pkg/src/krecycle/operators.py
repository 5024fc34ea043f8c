"""Matrix-free operators for the Fields-of-Experts inpainting lower level.

The lower-level objective in the image variable ``x`` is

    L(x, theta) = 0.5*||A x - y||^2 + 0.5*eps*||x||^2
                  + sum_i exp(theta0_i) * ||K_i x||^2

where ``A`` keeps a subset of the pixels, ``eps > 0`` is a small ridge
that guarantees strong convexity, and ``K_i`` is a zero-padded 2-D
convolution with the i-th learned kernel.  L is quadratic in ``x``, so
its Hessian

    H = A^T A + eps*I + 2 * sum_i exp(theta0_i) * K_i^T K_i

does not depend on ``x`` and is symmetric positive definite with
smallest eigenvalue >= eps.  Everything here works on flat n-vectors;
images carry their (rows, cols) shape alongside the data.

Convolution convention: true convolution (kernel flipped) with zero
boundary and output of the same shape as the input.  The convention is
a fixed choice of this library; learned filters are only meaningful
relative to it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d, correlate2d

__all__ = [
    "ClampWarning",
    "FoEParams",
    "ImageVector",
    "InpaintingProblem",
    "Kernel",
    "MixedJacobianOperator",
    "SymmetricOperator",
    "conv2d",
    "conv2d_adjoint",
    "dense_operator",
    "foe_cost",
    "foe_gradient",
    "foe_hessian",
    "mixed_jacobian",
    "naive_apply_cost",
]

# exp() argument clamp; exp(30) ~ 1e13 keeps products finite in float64
LOG_WEIGHT_CLAMP = 30.0


class ClampWarning(UserWarning):
    """Raised when log-weights are clamped before exponentiation."""


def naive_apply_cost(n: int) -> int:
    """FLOPs of a dense n x n matrix-vector product, 2n^2 - n."""
    return 2 * n * n - n


@dataclass(frozen=True)
class ImageVector:
    """A flat image vector together with its 2-D shape."""

    data: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).ravel()
        object.__setattr__(self, "data", data)
        rows, cols = self.shape
        if rows * cols != data.size:
            raise ValueError(
                f"shape {self.shape} inconsistent with vector of length {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite entries")

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "ImageVector":
        mat = np.asarray(mat, dtype=float)
        return cls(mat.ravel(), mat.shape)

    def as_matrix(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size


@dataclass(frozen=True)
class Kernel:
    """A square convolution kernel of odd size."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ValueError(f"kernel must be square, got shape {weights.shape}")
        if weights.shape[0] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {weights.shape[0]}")
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class FoEParams:
    """Learnable parameters: one log-weight and one kernel per filter.

    The flat layout interleaves blocks [theta0_i, kernel_i (row-major)],
    giving p = N * (1 + q^2) entries in total.
    """

    log_weights: np.ndarray
    kernels: tuple[Kernel, ...]

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float).ravel()
        kernels = tuple(self.kernels)
        if lw.size != len(kernels):
            raise ValueError(
                f"{lw.size} log-weights but {len(kernels)} kernels"
            )
        sizes = {k.size for k in kernels}
        if len(sizes) > 1:
            raise ValueError(f"kernels have mixed sizes {sorted(sizes)}")
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "kernels", kernels)

    @property
    def num_filters(self) -> int:
        return self.log_weights.size

    @property
    def kernel_size(self) -> int:
        return self.kernels[0].size

    @property
    def num_params(self) -> int:
        return self.num_filters * (1 + self.kernel_size**2)

    def flatten(self) -> np.ndarray:
        parts = []
        for theta0, kernel in zip(self.log_weights, self.kernels):
            parts.append([theta0])
            parts.append(kernel.weights.ravel())
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, theta: np.ndarray, num_filters: int, kernel_size: int) -> "FoEParams":
        theta = np.asarray(theta, dtype=float).ravel()
        block = 1 + kernel_size**2
        if theta.size != num_filters * block:
            raise ValueError(
                f"parameter vector of length {theta.size} does not match "
                f"{num_filters} filters of size {kernel_size}"
            )
        log_weights = np.empty(num_filters)
        kernels = []
        for i in range(num_filters):
            chunk = theta[i * block : (i + 1) * block]
            log_weights[i] = chunk[0]
            kernels.append(Kernel(chunk[1:].reshape(kernel_size, kernel_size)))
        return cls(log_weights, tuple(kernels))

    def filter_weights(self) -> np.ndarray:
        """exp(theta0) with the clamp applied; warns when it bites."""
        lw = self.log_weights
        if np.any(np.abs(lw) > LOG_WEIGHT_CLAMP):
            warnings.warn(
                "log-weights clamped to +/-%g before exponentiation" % LOG_WEIGHT_CLAMP,
                ClampWarning,
                stacklevel=2,
            )
            lw = np.clip(lw, -LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP)
        return np.exp(lw)


@dataclass(frozen=True)
class InpaintingProblem:
    """Subsampled, noisy observation of an image plus the ridge weight.

    ``mask_rows`` lists the retained pixel indices; the subsampling
    operator A is never materialized and A^T A acts as a 0/1 diagonal.
    """

    mask_rows: np.ndarray
    y: np.ndarray
    ridge: float
    shape: tuple[int, int]
    x_true: ImageVector | None = None

    def __post_init__(self):
        mask = np.asarray(self.mask_rows, dtype=np.int64).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        n = self.shape[0] * self.shape[1]
        if mask.size != np.unique(mask).size:
            raise ValueError("mask indices must be distinct")
        if mask.size and (mask.min() < 0 or mask.max() >= n):
            raise ValueError(f"mask indices must lie in [0, {n})")
        if y.size != mask.size:
            raise ValueError(f"y has length {y.size}, mask has {mask.size} rows")
        if not self.ridge > 0:
            raise ValueError(f"ridge must be positive, got {self.ridge}")
        object.__setattr__(self, "mask_rows", mask)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def m(self) -> int:
        return self.mask_rows.size

    def apply_A(self, x: np.ndarray) -> np.ndarray:
        return x[self.mask_rows]

    def apply_At(self, r: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        out[self.mask_rows] = r
        return out

    def mask_diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        d[self.mask_rows] = 1.0
        return d


class SymmetricOperator:
    """Matrix-free symmetric map on n-vectors with a declared apply cost.

    ``apply_cost`` is the FLOP count charged per application by the
    solver cost model; it defaults to the dense 2n^2 - n when the
    structure is unknown.
    """

    def __init__(self, dim, apply, apply_cost=None):
        self.dim = int(dim)
        self._apply = apply
        self.apply_cost = int(apply_cost) if apply_cost is not None else naive_apply_cost(self.dim)
        if self.apply_cost < 0:
            raise ValueError("apply_cost must be nonnegative")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"operator of dim {self.dim} applied to shape {v.shape}")
        return self._apply(v)

    def apply_matrix(self, M: np.ndarray) -> np.ndarray:
        """Apply column-by-column to an n x t matrix."""
        return np.column_stack([self(M[:, j]) for j in range(M.shape[1])])

    def to_dense(self) -> np.ndarray:
        """Materialize by application to the canonical basis (tests/oracles)."""
        eye = np.eye(self.dim)
        return self.apply_matrix(eye)


def dense_operator(M: np.ndarray, apply_cost=None) -> SymmetricOperator:
    """Wrap an explicit symmetric matrix as a SymmetricOperator."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return SymmetricOperator(M.shape[0], lambda v: M @ v, apply_cost)


class MixedJacobianOperator:
    """Adjoint action w -> J w of J = -(second mixed derivative of L)^T.

    J maps image space to parameter space (p x n); only the action on
    n-vectors is ever needed.  ``adjoint_cost`` is informational.
    """

    def __init__(self, num_params, dim, apply_adjoint, adjoint_cost=0):
        self.num_params = int(num_params)
        self.dim = int(dim)
        self._apply_adjoint = apply_adjoint
        self.adjoint_cost = int(adjoint_cost)

    def apply_adjoint(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"expected an n-vector of length {self.dim}, got shape {w.shape}")
        return self._apply_adjoint(w)

    def apply_adjoint_matrix(self, W: np.ndarray) -> np.ndarray:
        """J W for an n x t matrix W, assembled column by column."""
        return np.column_stack([self.apply_adjoint(W[:, j]) for j in range(W.shape[1])])

    def to_dense(self) -> np.ndarray:
        return self.apply_adjoint_matrix(np.eye(self.dim))


def _check_image(x: ImageVector, shape: tuple[int, int]):
    if x.shape != shape:
        raise ValueError(f"image shape {x.shape} does not match expected {shape}")


def conv2d(kernel: Kernel, x: ImageVector) -> ImageVector:
    """Zero-padded true 2-D convolution, output the same shape as x."""
    out = convolve2d(x.as_matrix(), kernel.weights, mode="same", boundary="fill")
    return ImageVector(out.ravel(), x.shape)


def conv2d_adjoint(kernel: Kernel, x: ImageVector) -> ImageVector:
    """Adjoint of conv2d under the Euclidean inner product (correlation)."""
    out = correlate2d(x.as_matrix(), kernel.weights, mode="same", boundary="fill")
    return ImageVector(out.ravel(), x.shape)


def _conv_flat(kernel: Kernel, x: np.ndarray, shape) -> np.ndarray:
    return convolve2d(x.reshape(shape), kernel.weights, mode="same", boundary="fill").ravel()


def _conv_adj_flat(kernel: Kernel, x: np.ndarray, shape) -> np.ndarray:
    return correlate2d(x.reshape(shape), kernel.weights, mode="same", boundary="fill").ravel()


def foe_cost(x: ImageVector, params: FoEParams, prob: InpaintingProblem) -> float:
    """0.5*||Ax - y||^2 + 0.5*eps*||x||^2 + sum_i w_i ||K_i x||^2."""
    _check_image(x, prob.shape)
    xv = x.data
    resid = prob.apply_A(xv) - prob.y
    value = 0.5 * float(resid @ resid) + 0.5 * prob.ridge * float(xv @ xv)
    for w, kernel in zip(params.filter_weights(), params.kernels):
        kx = _conv_flat(kernel, xv, prob.shape)
        value += w * float(kx @ kx)
    if not np.isfinite(value):
        raise FloatingPointError(
            "non-finite lower-level cost; exp(log-weight) overflowed the filter term"
        )
    return value


def foe_gradient(x: ImageVector, params: FoEParams, prob: InpaintingProblem) -> np.ndarray:
    """Gradient in x:  A^T(Ax - y) + eps*x + 2 sum_i w_i K_i^T K_i x."""
    _check_image(x, prob.shape)
    xv = x.data
    grad = prob.apply_At(prob.apply_A(xv) - prob.y) + prob.ridge * xv
    for w, kernel in zip(params.filter_weights(), params.kernels):
        kx = _conv_flat(kernel, xv, prob.shape)
        grad += (2.0 * w) * _conv_adj_flat(kernel, kx, prob.shape)
    return grad


def _hessian_apply_cost(n: int, num_filters: int, kernel_size: int) -> int:
    # mask select+write (n) + accumulate (n) + ridge scale+add (2n)
    # per filter: two convolutions at n(2q^2 - 1) each, scale (n), accumulate (n)
    conv = n * (2 * kernel_size**2 - 1)
    return 4 * n + num_filters * (2 * conv + 2 * n)


def foe_hessian(params: FoEParams, prob: InpaintingProblem) -> SymmetricOperator:
    """The (x-independent) lower-level Hessian as a matrix-free operator.

    v -> A^T A v + eps*v + 2 sum_i w_i K_i^T K_i v.  Filter weights are
    exponentiated once here and cached in the closure.
    """
    weights = params.filter_weights()
    kernels = params.kernels
    diag = prob.mask_diagonal()
    ridge = prob.ridge
    shape = prob.shape

    def apply(v: np.ndarray) -> np.ndarray:
        out = diag * v + ridge * v
        for w, kernel in zip(weights, kernels):
            kv = _conv_flat(kernel, v, shape)
            out += (2.0 * w) * _conv_adj_flat(kernel, kv, shape)
        return out

    cost = _hessian_apply_cost(prob.n, params.num_filters, params.kernel_size)
    return SymmetricOperator(prob.n, apply, cost)


def _shift_dot(v: np.ndarray, x: np.ndarray, offsets: int) -> np.ndarray:
    """q x q array with entry [a, b] = sum_p v[p] * x[p - (a - c), p - (b - c)].

    Equals the gradient of <conv2d(k, x), v> with respect to the kernel;
    a dozen zero-padded shifts beat building sparse matrices at this scale.
    """
    q = offsets
    c = q // 2
    rows, cols = v.shape
    out = np.zeros((q, q))
    for a in range(q):
        da = a - c
        for b in range(q):
            db = b - c
            # overlap of x shifted by (da, db) with v
            r0, r1 = max(0, da), min(rows, rows + da)
            c0, c1 = max(0, db), min(cols, cols + db)
            if r0 >= r1 or c0 >= c1:
                continue
            out[a, b] = float(
                np.sum(v[r0:r1, c0:c1] * x[r0 - da : r1 - da, c0 - db : c1 - db])
            )
    return out


def mixed_jacobian(params: FoEParams, x_hat: ImageVector, prob: InpaintingProblem) -> MixedJacobianOperator:
    """Build J with (J w) blocks per filter i:

      theta0_i component:  -2 w_i <K_i x_hat, K_i w>
      kernel entry a:      -2 w_i (<K_i x_hat, E_a w> + <E_a x_hat, K_i w>)

    where E_a convolves with the indicator kernel at offset a.
    """
    _check_image(x_hat, prob.shape)
    weights = params.filter_weights()
    kernels = params.kernels
    q = params.kernel_size
    shape = prob.shape
    xv = x_hat.data
    x_mat = xv.reshape(shape)
    # K_i x_hat is reused for every application
    kx_list = [_conv_flat(k, xv, shape) for k in kernels]

    def apply_adjoint(w: np.ndarray) -> np.ndarray:
        w_mat = w.reshape(shape)
        blocks = []
        for weight, kernel, kx in zip(weights, kernels, kx_list):
            kw = _conv_flat(kernel, w, shape)
            head = -2.0 * weight * float(kx @ kw)
            grad_k = _shift_dot(kx.reshape(shape), w_mat, q) + _shift_dot(
                kw.reshape(shape), x_mat, q
            )
            blocks.append(np.concatenate(([head], (-2.0 * weight) * grad_k.ravel())))
        return np.concatenate(blocks)

    n = prob.n
    conv = n * (2 * q**2 - 1)
    cost = params.num_filters * (2 * conv + 2 * n * q**2)
    return MixedJacobianOperator(params.num_params, n, apply_adjoint, cost)

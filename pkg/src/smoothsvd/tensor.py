"""Dense float64 tensor kernels: matmul, one-sided Jacobi SVD, truncation, im2col.

Tensors are plain ``numpy.ndarray`` objects in float64. The helpers here add
the shape and finiteness checks the rest of the package relies on.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConvergenceError, DimensionError, NumericError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60
SIGMA_CLAMP = 1e-12
# Column-norm floor (relative to the Frobenius norm) below which Jacobi skips a pair.
NEGLIGIBLE_COLUMN = 1e-15


def as_tensor(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _check_finite(a, what="input"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite entries in {what}")


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def frobenius_norm(a):
    a = as_tensor(a)
    _check_finite(a)
    return float(np.sqrt(np.sum(a * a)))


def l1_norm(a):
    a = as_tensor(a)
    _check_finite(a)
    return float(np.sum(np.abs(a)))


@dataclass(frozen=True)
class SvdFactorization:
    """Compact SVD ``a = u @ diag(sigma) @ v.T`` with ``k = min(m, n)``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    @property
    def k(self):
        return self.sigma.shape[0]

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


@numba.njit(cache=True)
def _jacobi_sweeps(at, vt, tol, max_sweeps):
    # Cyclic one-sided Jacobi. Operates on transposed storage so each column
    # of the matrix is a contiguous row of ``at``. Returns the number of sweeps
    # used, or -1 if the off-diagonal test never passed.
    n, m = at.shape
    # Columns at roundoff level relative to the whole matrix are left alone;
    # their relative orthogonality test would otherwise chase noise forever.
    total = 0.0
    for p in range(n):
        for i in range(m):
            total += at[p, i] * at[p, i]
    negligible = (NEGLIGIBLE_COLUMN * NEGLIGIBLE_COLUMN) * total
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            ap = at[p]
            vp = vt[p]
            for q in range(p + 1, n):
                aq = at[q]
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += ap[i] * ap[i]
                    beta += aq[i] * aq[i]
                    gamma += ap[i] * aq[i]
                if alpha <= negligible or beta <= negligible:
                    continue
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha) * np.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = ap[i]
                    y = aq[i]
                    ap[i] = c * x - s * y
                    aq[i] = s * x + c * y
                vq = vt[q]
                for i in range(n):
                    x = vp[i]
                    y = vq[i]
                    vp[i] = c * x - s * y
                    vq[i] = s * x + c * y
        if not rotated:
            return sweep
    return -1


def _complete_basis(u, filled):
    """Fill columns of ``u`` not in ``filled`` with an orthonormal complement."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if filled[j]]
    for j in range(k):
        if filled[j]:
            continue
        best, best_norm = None, -1.0
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > best_norm:
                best, best_norm = cand, nrm
            if nrm > 0.7:
                break
        col = best / best_norm
        u[:, j] = col
        basis.append(col)
    return u


def _svd_tall(a, tol, max_sweeps):
    m, n = a.shape
    work_t = np.ascontiguousarray(a.T)
    v_t = np.eye(n)
    if n > 1:
        sweeps = _jacobi_sweeps(work_t, v_t, tol, max_sweeps)
        if sweeps < 0:
            raise ConvergenceError(max_sweeps)
    work = work_t.T
    v = v_t.T
    sigma = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    top = sigma[0] if n else 0.0
    keep = sigma > SIGMA_CLAMP * top if top > 0 else np.zeros(n, dtype=bool)
    sigma = np.where(keep, sigma, 0.0)
    u = np.zeros((m, n))
    u[:, keep] = work[:, keep] / sigma[keep]
    if not np.all(keep):
        u = _complete_basis(u, keep)
    return u, sigma, v


def svd(a, tol=SVD_TOL, max_sweeps=SVD_MAX_SWEEPS):
    """Compact SVD by one-sided Jacobi rotations.

    Works on the taller orientation (transposing when ``m < n``). Singular
    values below ``1e-12 * sigma[0]`` are set to exactly zero and their left
    singular vectors are replaced by an orthonormal completion.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"svd expects a non-empty matrix, got shape {a.shape}")
    _check_finite(a, "svd input")
    if a.shape[0] >= a.shape[1]:
        u, sigma, v = _svd_tall(a, tol, max_sweeps)
    else:
        v, sigma, u = _svd_tall(np.ascontiguousarray(a.T), tol, max_sweeps)
    return SvdFactorization(u=u, sigma=sigma, v=v)


def truncate(f: SvdFactorization, r: int):
    """Split the rank-``r`` truncation into ``(w1, w2)`` with ``w2 @ w1 ~= a``.

    ``w1 = diag(sigma[:r]) @ v[:, :r].T`` (r x n), ``w2 = u[:, :r]`` (m x r).
    """
    if not isinstance(r, (int, np.integer)) or r < 1 or r > f.k:
        raise ValueError(f"rank {r} outside [1, {f.k}]")
    w1 = f.sigma[:r, None] * f.v[:, :r].T
    w2 = f.u[:, :r].copy()
    return w1, w2


def conv_output_size(h, w, kh, kw, stride, pad):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def im2col_batch(x, kh, kw, stride=1, pad=0):
    """Unfold a batch ``B x C x H x W`` into ``B x (C*kh*kw) x (Ho*Wo)``.

    Rows are ordered channel, kernel row, kernel column; columns walk the
    output grid row-major.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col_batch expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = conv_output_size(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            cols[:, :, i, j] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im_batch(cols, input_shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to image space."""
    b, c, h, w = input_shape
    ho, wo = conv_output_size(h, w, kh, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def im2col(x, kh, kw, stride=1, pad=0):
    """Single-image unfold: ``C x H x W`` -> ``(C*kh*kw) x (Ho*Wo)``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"im2col expects C x H x W, got {x.shape}")
    return im2col_batch(x[None], kh, kw, stride, pad)[0]

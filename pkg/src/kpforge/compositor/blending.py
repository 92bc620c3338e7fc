"""Alpha, Poisson (seamless cloning) and Laplacian pyramid blending.

All functions take H x W or H x W x C arrays of any numeric dtype and return
float64 images on the same 0..255 intensity scale.
"""

from __future__ import annotations

import cv2
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

BLEND_MODES = ("alpha", "poisson", "laplacian")


class BlendError(ValueError):
    pass


class PoissonConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"Poisson solve did not converge in {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


def _as_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64)


def _mask_like(mask: np.ndarray, image: np.ndarray) -> np.ndarray:
    mask = _as_float(mask)
    if mask.shape[:2] != image.shape[:2]:
        raise BlendError(f"mask shape {mask.shape[:2]} does not match image {image.shape[:2]}")
    if image.ndim == 3 and mask.ndim == 2:
        mask = mask[:, :, None]
    return mask


def alpha_blend(foreground: np.ndarray, mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    fg, bg = _as_float(foreground), _as_float(background)
    if fg.shape != bg.shape:
        raise BlendError(f"foreground {fg.shape} and background {bg.shape} differ")
    m = _mask_like(mask, fg)
    return m * fg + (1.0 - m) * bg


def poisson_system(mask: np.ndarray):
    """Sparse 5-point Laplacian restricted to the pixels inside ``mask``.

    Returns (matrix, flat indices of the unknowns, index map with -1 outside).
    """
    h, w = mask.shape
    inside = mask.ravel()
    unknowns = np.flatnonzero(inside)
    index = np.full(h * w, -1, dtype=np.int64)
    index[unknowns] = np.arange(unknowns.size)
    rows, cols = np.divmod(unknowns, w)
    ii = [np.arange(unknowns.size)]
    jj = [np.arange(unknowns.size)]
    vv = [np.full(unknowns.size, 4.0)]
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = (rows + dr) * w + (cols + dc)
        nb_index = index[nb]
        keep = nb_index >= 0
        ii.append(np.flatnonzero(keep))
        jj.append(nb_index[keep])
        vv.append(np.full(int(keep.sum()), -1.0))
    n = unknowns.size
    matrix = sp.csr_matrix((np.concatenate(vv), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n))
    return matrix, unknowns, index


def poisson_blend(foreground: np.ndarray, mask: np.ndarray, background: np.ndarray,
                  rtol: float = 1e-10, maxiter: int | None = None) -> np.ndarray:
    """Seamless cloning: inside the mask the output keeps the foreground's
    discrete Laplacian, everywhere else it is the background.

    The mask must not touch the image border. Solved per channel with
    conjugate gradients; ``maxiter`` defaults to 10 x (mask pixel count).
    """
    fg, bg = _as_float(foreground), _as_float(background)
    if fg.shape != bg.shape:
        raise BlendError(f"foreground {fg.shape} and background {bg.shape} differ")
    region = np.asarray(mask) > 0.5
    if region.shape != fg.shape[:2]:
        raise BlendError(f"mask shape {region.shape} does not match image {fg.shape[:2]}")
    if region[0].any() or region[-1].any() or region[:, 0].any() or region[:, -1].any():
        raise BlendError("Poisson mask must be strictly inside the canvas")
    out = bg.copy()
    if not region.any():
        return out
    matrix, unknowns, _ = poisson_system(region)
    h, w = region.shape
    rows, cols = np.divmod(unknowns, w)
    maxiter = maxiter if maxiter is not None else 10 * unknowns.size
    fg_ch = fg.reshape(h, w, -1)
    bg_ch = bg.reshape(h, w, -1)
    out_ch = out.reshape(h, w, -1)
    for c in range(fg_ch.shape[2]):
        g, f = fg_ch[:, :, c], bg_ch[:, :, c]
        rhs = 4.0 * g[rows, cols]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = rows + dr, cols + dc
            rhs -= g[nr, nc]
            outside = ~region[nr, nc]
            rhs[outside] += f[nr[outside], nc[outside]]
        x0 = f[rows, cols]
        x, info = cg(matrix, rhs, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter)
        if info != 0:
            norm = np.linalg.norm(rhs) or 1.0
            raise PoissonConvergenceError(float(np.linalg.norm(matrix @ x - rhs) / norm), maxiter)
        out_ch[rows, cols, c] = x
    return out


def discrete_laplacian(image: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian (sum of neighbours minus 4x centre) on interior pixels; border is 0."""
    img = _as_float(image)
    lap = np.zeros_like(img)
    lap[1:-1, 1:-1] = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
                       - 4.0 * img[1:-1, 1:-1])
    return lap


def _pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return cv2.copyMakeBorder(image, 0, ph, 0, pw, cv2.BORDER_REFLECT_101)


def gaussian_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [image]
    for _ in range(levels - 1):
        pyr.append(cv2.pyrDown(pyr[-1]))
    return pyr


def laplacian_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    gauss = gaussian_pyramid(image, levels)
    pyr = []
    for fine, coarse in zip(gauss, gauss[1:]):
        up = cv2.pyrUp(coarse, dstsize=(fine.shape[1], fine.shape[0]))
        pyr.append(fine - up.reshape(fine.shape))
    pyr.append(gauss[-1])
    return pyr


def collapse_pyramid(pyr: list[np.ndarray]) -> np.ndarray:
    out = pyr[-1]
    for band in reversed(pyr[:-1]):
        out = cv2.pyrUp(out, dstsize=(band.shape[1], band.shape[0])).reshape(band.shape) + band
    return out


def laplacian_blend(foreground: np.ndarray, mask: np.ndarray, background: np.ndarray,
                    levels: int = 4) -> np.ndarray:
    """Multi-band blend: Laplacian bands mixed by the mask's Gaussian pyramid.

    The blended difference ``mask_k * (fg_k - bg_k)`` is collapsed and added to
    the untouched background, so pixels beyond the mask's reach stay bitwise
    equal to the background. Images are padded (reflect) to a multiple of
    2**(levels - 1) and cropped back.
    """
    if levels < 1:
        raise BlendError(f"levels must be >= 1, got {levels}")
    fg, bg = _as_float(foreground), _as_float(background)
    if fg.shape != bg.shape:
        raise BlendError(f"foreground {fg.shape} and background {bg.shape} differ")
    m = _as_float(mask)
    if m.shape[:2] != fg.shape[:2]:
        raise BlendError(f"mask shape {m.shape[:2]} does not match image {fg.shape[:2]}")
    h, w = fg.shape[:2]
    if min(h, w) < 2 ** (levels - 1):
        raise BlendError(f"image {h}x{w} too small for {levels} pyramid levels")
    if fg.ndim == 3 and m.ndim == 2:
        m = np.repeat(m[:, :, None], fg.shape[2], axis=2)
    multiple = 2 ** (levels - 1)
    fg_p, bg_p, m_p = (_pad_to_multiple(a, multiple) for a in (fg, bg, m))
    lf = laplacian_pyramid(fg_p, levels)
    lb = laplacian_pyramid(bg_p, levels)
    gm = gaussian_pyramid(m_p, levels)
    diff = [gm_k.reshape(lf_k.shape) * (lf_k - lb_k) for lf_k, lb_k, gm_k in zip(lf, lb, gm)]
    delta = collapse_pyramid(diff)[:h, :w]
    return np.clip(bg + delta.reshape(bg.shape), 0.0, 255.0)

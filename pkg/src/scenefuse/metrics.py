"""Image metrics: PSNR on 8-bit RGB and background-coloured holes inside a silhouette."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_erosion

PSNR_CAP = 99.0


def _as_uint8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def mse_8bit(render, reference) -> float:
    a, b = _as_uint8(render), _as_uint8(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def psnr(render, reference) -> float:
    """PSNR in dB between two RGB images (float in [0, 1] or uint8), capped at 99."""
    return psnr_from_mse(mse_8bit(render, reference))


def pooled_psnr(renders, references) -> float:
    """PSNR of the mean squared error pooled over a list of image pairs."""
    if len(renders) != len(references):
        raise ValueError("render and reference counts differ")
    return psnr_from_mse(float(np.mean([mse_8bit(a, b) for a, b in zip(renders, references)])))


def silhouette(reference, background=(1.0, 1.0, 1.0), tol: float = 0.1) -> np.ndarray:
    """Pixels of the reference that differ from the background colour."""
    ref = np.asarray(reference, dtype=np.float64)
    if ref.max() > 1.0:
        ref = ref / 255.0
    return np.abs(ref - np.asarray(background)).max(axis=-1) >= tol


def hole_fraction(render, reference, background=(1.0, 1.0, 1.0), tol: float = 0.1, erode: int = 1) -> float:
    """Share of silhouette pixels (eroded by `erode` px) that the render leaves background-coloured."""
    img = np.asarray(render, dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    if img.shape != np.asarray(reference).shape:
        raise ValueError("shape mismatch")
    mask = silhouette(reference, background, tol)
    if erode > 0:
        mask = binary_erosion(mask, iterations=erode)
    if not mask.any():
        return 0.0
    holes = ~silhouette(img, background, tol)
    return float(np.mean(holes[mask]))


def evaluate(renders, references, background=(1.0, 1.0, 1.0)) -> dict:
    """Per-image and pooled PSNR plus hole fractions for matching lists of images."""
    if len(renders) != len(references):
        raise ValueError("render and reference counts differ")
    per = [psnr(a, b) for a, b in zip(renders, references)]
    holes = [hole_fraction(a, b, background) for a, b in zip(renders, references)]
    return {"psnr": per, "psnr_mean": float(np.mean(per)) if per else PSNR_CAP,
            "psnr_pooled": pooled_psnr(renders, references) if per else PSNR_CAP,
            "hole_fraction": holes, "hole_fraction_max": float(max(holes)) if holes else 0.0}

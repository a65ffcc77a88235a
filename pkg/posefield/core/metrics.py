"""
Image quality metrics on [0, 1] images.
"""
import math
import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0


def psnr(image: np.ndarray, reference: np.ndarray, max_value: float = 1.0, cap: float = PSNR_CAP) -> float:
    image, reference = _pair(image, reference)
    mse = float(np.mean((image - reference) ** 2))
    if mse <= 10.0 ** (-cap / 10.0) * max_value ** 2:
        return cap
    return min(cap, 20.0 * math.log10(max_value / math.sqrt(mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    m = (size - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _filter(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    return convolve2d(x, np.rot90(window, 2), mode='valid')


def ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray,
                 max_value: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    mu_a  = _filter(a, window)
    mu_b  = _filter(b, window)
    var_a = _filter(a * a, window) - mu_a ** 2
    var_b = _filter(b * b, window) - mu_b ** 2
    cov   = _filter(a * b, window) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.mean(ssim_map))


def ssim(image: np.ndarray, reference: np.ndarray, max_value: float = 1.0,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """ Gaussian-window SSIM averaged over channels; the window shrinks to fit small images """
    image, reference = _pair(image, reference)
    if image.ndim == 2:
        image, reference = image[..., None], reference[..., None]
    size   = min(window_size, image.shape[0], image.shape[1])
    window = gaussian_window(size, sigma)
    return float(np.mean([ssim_channel(image[..., c], reference[..., c], window, max_value)
                          for c in range(image.shape[-1])]))


def _pair(image, reference):
    image     = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f'Image shapes differ: {image.shape} vs {reference.shape}')
    return image, reference

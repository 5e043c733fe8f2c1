import numpy as np


def fft_conv2d_same(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Linear (zero-padded) 'same' convolution of a 2-D image via the real FFT.

    Matches ``conv2d_same`` for a single channel. The kernel is centred at
    ``(kh // 2, kw // 2)``; it must be odd-sized and no larger than the image.
    """
    image = np.asarray(image, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if image.ndim != 2 or kernel.ndim != 2:
        raise ValueError("fft_conv2d_same works on 2-D arrays")
    h, w = image.shape
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    fh, fw = h + kh - 1, w + kw - 1
    spec = np.fft.rfft2(image, s=(fh, fw)) * np.fft.rfft2(kernel, s=(fh, fw))
    full = np.fft.irfft2(spec, s=(fh, fw))
    return full[kh // 2:kh // 2 + h, kw // 2:kw // 2 + w]

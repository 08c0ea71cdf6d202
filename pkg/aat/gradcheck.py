"""
Central finite differences, for checking the gradients produced by `aat.tensor`.
"""

from typing import Callable

import numpy as np

FINITE_DIFFERENCE_STEP = 1e-5


def numerical_gradient(
    fn: Callable[[], float], array: np.ndarray, step: float = FINITE_DIFFERENCE_STEP
) -> np.ndarray:
    """
    Estimates the gradient of `fn` with respect to `array` by perturbing each entry in place.

    :param fn: A function of no arguments that reads `array` and returns a float.
    :param array: The array to differentiate with respect to. It is restored before returning.
    :param step: The finite difference step.
    :return: An array shaped like `array`.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus = fn()
        array[index] = original - step
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * step)
    return grad


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4
) -> float:
    """
    The largest entrywise `|a - n| / max(|a|, |n|, floor)`.

    `floor` turns the comparison into an absolute one for gradients that are close to zero, where finite
    differences carry more noise than signal.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))

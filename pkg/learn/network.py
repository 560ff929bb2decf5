import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cloud.exceptions import ShapeMismatchError
from learn.models import INPUT_SCALE, EmbeddingField

NORM_FLOOR = 1e-12


def prepare_input(rv):
    """Range-изображение -> вход сети: каналы масштабированы, невалидные пиксели нулевые."""
    return np.where(rv.valid_mask[..., None], rv.data * INPUT_SCALE, 0.0)


def _im2col(x):
    """(H, W, C) -> (H*W, C*9) для свёртки 3x3 с нулевым дополнением."""
    height, width, channels = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))
    return windows.reshape(height * width, channels * 9)


def _col2im(cols, height, width, channels):
    """Обратная к _im2col свёртка градиента: сумма вкладов окон в дополненный тензор."""
    cols = cols.reshape(height, width, channels, 3, 3)
    padded = np.zeros((height + 2, width + 2, channels))
    for i in range(3):
        for j in range(3):
            padded[i:i + height, j:j + width, :] += cols[:, :, :, i, j]
    return padded[1:-1, 1:-1, :]


def forward(net, rv, expected_shape=None):
    """Прямой проход по range-изображению (или готовому входу H x W x 5)."""
    if hasattr(rv, "valid_mask"):
        x, valid = prepare_input(rv), rv.valid_mask
    else:
        x, valid = rv
    height, width = valid.shape
    if expected_shape is not None and (height, width) != tuple(expected_shape):
        raise ShapeMismatchError(f"ожидалось изображение {tuple(expected_shape)}, получено {(height, width)}")
    if x.shape != (height, width, len(INPUT_SCALE)):
        expected = (height, width, len(INPUT_SCALE))
        raise ShapeMismatchError(f"вход сети должен иметь форму {expected}, получено {x.shape}")
    p = net.params
    hidden = net.hidden

    cols1 = _im2col(x)
    a1 = np.tanh(cols1 @ p["w1"].reshape(hidden, -1).T + p["b1"])
    cols2 = _im2col(a1.reshape(height, width, hidden))
    a2 = np.tanh(cols2 @ p["w2"].reshape(hidden, -1).T + p["b2"])
    z = a2 @ p["w3"].T + p["b3"]

    if net.output == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-z))
        norm = None
    else:
        norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
        out = z / norm
    mask = valid.reshape(-1, 1)
    features = np.where(mask, out, 0.0).reshape(height, width, -1)
    cache = {"cols1": cols1, "a1": a1, "cols2": cols2, "a2": a2, "out": out, "norm": norm, "mask": mask}
    return EmbeddingField(features, valid, cache)


def backward(net, field, upstream):
    """Градиенты параметров по градиенту upstream (H x W x C) относительно признаков field."""
    cache = field.cache
    p = net.params
    height, width = field.valid_mask.shape
    hidden = net.hidden
    d_out = np.where(cache["mask"], upstream.reshape(height * width, -1), 0.0)
    out = cache["out"]

    if net.output == "sigmoid":
        dz = d_out * out * (1.0 - out)
    else:
        radial = (d_out * out).sum(axis=1, keepdims=True)
        dz = (d_out - out * radial) / cache["norm"]

    grads = {"w3": dz.T @ cache["a2"], "b3": dz.sum(axis=0)}
    da2 = dz @ p["w3"]
    dpre2 = da2 * (1.0 - cache["a2"] ** 2)
    grads["w2"] = (dpre2.T @ cache["cols2"]).reshape(p["w2"].shape)
    grads["b2"] = dpre2.sum(axis=0)
    da1 = _col2im(dpre2 @ p["w2"].reshape(hidden, -1), height, width, hidden).reshape(height * width, hidden)
    dpre1 = da1 * (1.0 - cache["a1"] ** 2)
    grads["w1"] = (dpre1.T @ cache["cols1"]).reshape(p["w1"].shape)
    grads["b1"] = dpre1.sum(axis=0)
    return grads

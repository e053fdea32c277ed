import numpy as np


def segment_sum(values, index, size):
    """Sum ``values[o]`` into bucket ``index[o]``; returns shape ``(size,) + values.shape[1:]``."""
    values = np.asarray(values, dtype=float)
    tail = values.shape[1:]
    flat = values.reshape(len(values), -1)
    out = np.empty((size, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=size)
    return out.reshape((size,) + tail)

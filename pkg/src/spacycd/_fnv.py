import numba
import numpy as np


@numba.njit(cache=True)
def fnv1a64_array(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h

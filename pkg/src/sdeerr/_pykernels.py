"""Pure-numpy path kernels, the fallback for ``sdeerr._ckernels``.

The random stream is SplitMix64 keyed per path: path ``i`` of stream ``k``
gets the key ``mix(k + (i+1)*G)`` and its uniforms are ``mix(key + j*G)`` for
``j = 1, 2, ...``. Consecutive uniforms are paired through Box-Muller, so step
``2m`` takes the cosine branch of pair ``m`` and step ``2m+1`` the sine branch.
"""
from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S11, _S27, _S30, _S31 = (np.uint64(k) for k in (11, 27, 30, 31))
_INV_2_53 = 1.0 / 9007199254740992.0
_TWO_PI = 6.283185307179586

MODEL_IDS = {"gbm": 0, "additive": 1, "bounded_tanh": 2}
SCHEME_IDS = {"euler": 0, "milstein": 1}


def mix(z: int) -> int:
    """Scalar SplitMix64 finalizer on Python ints."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _path_keys(stream_key: int, path_start: int, n_paths: int) -> np.ndarray:
    idx = np.arange(path_start + 1, path_start + n_paths + 1, dtype=np.uint64)
    return _mix_array(np.uint64(stream_key) + idx * np.uint64(GOLDEN))


def _unit(u: np.ndarray) -> np.ndarray:
    return ((u >> _S11).astype(np.float64) + 0.5) * _INV_2_53


def _normal_pair(keys: np.ndarray, pair: int) -> tuple[np.ndarray, np.ndarray]:
    ua = _mix_array(keys + np.uint64(((2 * pair + 1) * GOLDEN) & _MASK))
    ub = _mix_array(keys + np.uint64(((2 * pair + 2) * GOLDEN) & _MASK))
    r = np.sqrt(-2.0 * np.log(_unit(ua)))
    ang = _TWO_PI * _unit(ub)
    return r * np.cos(ang), r * np.sin(ang)


def normals_block(stream_key: int, path_start: int, step_start: int, out: np.ndarray) -> None:
    if step_start % 2 != 0:
        raise ValueError("step_start must be even")
    n_paths, m = out.shape
    keys = _path_keys(stream_key, path_start, n_paths)
    with np.errstate(over="ignore"):
        for j in range(0, m, 2):
            z0, z1 = _normal_pair(keys, (step_start + j) // 2)
            out[:, j] = z0
            if j + 1 < m:
                out[:, j + 1] = z1


def _coefficients(model: int, prm: np.ndarray, x: np.ndarray):
    if model == 0:
        return prm[0] * x, prm[1] * x, prm[1]
    if model == 1:
        return prm[0], prm[1], 0.0
    th = np.tanh(x)
    return prm[0] * th, prm[1] + prm[2] * th, prm[2] * (1.0 - th * th)


def terminal_values(model, params, x0, nodes, scheme, stream_key, path_start,
                    out_x, out_w, stride=1):
    """Same contract as the compiled ``terminal_values``."""
    if model not in (0, 1, 2):
        raise ValueError(f"unknown model id {model}")
    prm = np.zeros(4)
    prm[: min(len(params), 4)] = params[:4]

    def coeff(t, x):
        return _coefficients(model, prm, x)

    step_with_coefficients(coeff, x0, nodes, scheme, stream_key, path_start,
                           out_x, out_w, stride, normals=normals_block)


def step_with_coefficients(coeff, x0, nodes, scheme, stream_key, path_start,
                           out_x, out_w, stride=1, normals=normals_block, chunk=64):
    """Generic vectorized stepping.

    ``coeff(t, x)`` returns ``(drift, sigma, sigma_dx)``; ``normals`` is the
    block generator of whichever backend owns the stream.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    n_fine = len(nodes) - 1
    if stride < 1 or n_fine % stride != 0:
        raise ValueError("stride must divide the number of driver steps")
    n_paths = len(out_x)
    sq = np.sqrt(np.diff(nodes))
    x = np.full(n_paths, float(x0))
    w = np.zeros(n_paths)
    dw = np.zeros(n_paths)
    chunk = max(2, chunk - chunk % 2)
    block = np.empty((n_paths, chunk))
    block_start = -chunk
    sub = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for idx in range(n_fine):
            if idx >= block_start + chunk:
                block_start = idx
                normals(stream_key, path_start, block_start, block)
            if sub == 0:
                dw = 0.0 + sq[idx] * block[:, idx - block_start]
            else:
                dw = dw + sq[idx] * block[:, idx - block_start]
            sub += 1
            if sub < stride:
                continue
            sub = 0
            c = idx // stride
            t = nodes[c * stride]
            dt = nodes[(c + 1) * stride] - t
            drift, sig, sdx = coeff(t, x)
            if scheme == 1:
                x = x + drift * dt + sig * dw + 0.5 * sig * sdx * (dw * dw - dt)
            else:
                x = x + drift * dt + sig * dw
            w = w + dw
    out_x[:] = x
    out_w[:] = w

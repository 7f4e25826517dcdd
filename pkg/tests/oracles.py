"""Independent slow reference implementations used by the tests."""
from collections import defaultdict

import numpy as np

N = 42
CLIP = 5000.0


def kdi_oracle(keystrokes, clip=CLIP):
    """Enumerate consecutive pairs in plain Python, group by (i, j) and average."""
    groups = defaultdict(list)
    for a, b in zip(keystrokes, keystrokes[1:]):
        groups[(a.key_index, b.key_index)].append((
            b.press_ms - a.release_ms,   # ud
            b.press_ms - a.press_ms,     # dd
            b.release_ms - a.press_ms,   # du
            b.release_ms - a.release_ms,  # uu
        ))
    durations = defaultdict(list)
    for k in keystrokes:
        durations[k.key_index].append(k.release_ms - k.press_ms)

    out = np.zeros((5, N, N))
    for (i, j), vals in groups.items():
        for c in range(4):
            out[c, i, j] = sum(v[c] for v in vals) / len(vals)
    for k, vals in durations.items():
        out[4, k, k] = sum(vals) / len(vals)
    return np.clip(out, -clip, clip) / clip


def eer_grid_oracle(scores, labels, n_grid=10_000):
    """EER from FPR/FNR evaluated on a uniform threshold grid over [0, 1].

    Consecutive grid points with identical (FPR, FNR) are collapsed, then the
    sign change of FPR - FNR is located and linearly interpolated.
    """
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(bool)
    neg, pos = np.sort(s[~y]), np.sort(s[y])
    grid = np.linspace(0.0, 1.0 + 1.0 / n_grid, n_grid + 2)
    fpr = (len(neg) - np.searchsorted(neg, grid, side="left")) / len(neg)
    fnr = np.searchsorted(pos, grid, side="left") / len(pos)
    keep = np.r_[True, (np.diff(fpr) != 0) | (np.diff(fnr) != 0)]
    fpr, fnr = fpr[keep], fnr[keep]
    d = fpr - fnr
    zero = np.flatnonzero(d == 0)
    if zero.size:
        return float(fpr[zero[0]])
    k = int(np.flatnonzero(d > 0)[-1])
    alpha = d[k] / (d[k] - d[k + 1])
    return float(fpr[k] + alpha * (fpr[k + 1] - fpr[k]))


def conv2d_direct(x, w, b, stride=(1, 1), pad=(0, 0, 0, 0)):
    """Naive loop cross-correlation, (N, C, H, W) -> (N, O, H', W')."""
    t, bt, l, r = pad
    x = np.pad(x, ((0, 0), (0, 0), (t, bt), (l, r)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out

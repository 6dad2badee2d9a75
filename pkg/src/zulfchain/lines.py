"""Merging of discrete spectral lines."""

from __future__ import annotations

import numpy as np


def merge_lines(freqs: np.ndarray, amps: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Combine lines into clusters no wider than ``tol``.

    Lines are scanned in frequency order and a new cluster starts whenever a
    line lies more than ``tol`` above the first line of the current cluster,
    so dense spectra are not chained into one wide cluster.  Amplitudes are
    summed (complex amplitudes add coherently); the cluster frequency is the
    |amplitude|-weighted mean.
    """
    freqs = np.asarray(freqs, dtype=float)
    amps = np.asarray(amps)
    if freqs.size == 0:
        return freqs, amps
    order = np.argsort(freqs, kind="stable")
    f, a = freqs[order], amps[order]
    # exact duplicates first, which usually removes most lines
    key = np.round(f / max(tol * 1e-4, 1e-12)).astype(np.int64)
    uniq, start = np.unique(key, return_index=True)
    idx = np.repeat(np.arange(len(uniq)), np.diff(np.append(start, len(f))))
    a1 = np.zeros(len(uniq), dtype=a.dtype)
    np.add.at(a1, idx, a)
    w1 = np.bincount(idx, weights=np.abs(a))
    fw1 = np.bincount(idx, weights=np.abs(a) * f)
    f1 = np.where(w1 > 0, fw1 / np.where(w1 > 0, w1, 1.0), f[start])
    cid = np.empty(len(f1), dtype=np.int64)
    current, anchor = 0, f1[0]
    for i, x in enumerate(f1):
        if x - anchor > tol:
            current += 1
            anchor = x
        cid[i] = current
    n = current + 1
    tot = np.zeros(n, dtype=a.dtype)
    np.add.at(tot, cid, a1)
    w = np.bincount(cid, weights=np.abs(a1), minlength=n)
    fw = np.bincount(cid, weights=np.abs(a1) * f1, minlength=n)
    plain = np.bincount(cid, weights=f1, minlength=n) / np.bincount(cid, minlength=n)
    fc = np.where(w > 0, fw / np.where(w > 0, w, 1.0), plain)
    return fc, tot

"""FFT band splitting of trajectories and the packed high-frequency layout.

A length-N real signal is written as

    x_u = sum_l  a_l cos(2*pi*l*u/N) + b_l sin(2*pi*l*u/N),   l = 0..N-1,

with ``a_l = Re(X_l)/N`` and ``b_l = -Im(X_l)/N`` for the forward FFT ``X``.
Negative indices wrap (a_{-k} = a_{N-k}); for real signals a_{N-k} = a_k and
b_{N-k} = -b_k.

Given a cutoff L (valid when 4 <= L and 4L <= N) the spectrum is split into a
low band ("dc"), a mid band ("ac") and a discarded remainder.  Two band
definitions are supported:

- ``"symmetric"`` (default): dc covers |l| <= 2, ac covers 3 <= |l| <= L-1.
  Both bands are idempotent projections and real for real input.
- ``"literal"``: dc covers signed l in [-3, 2], ac covers [-L, -4] u [3, L-1].
  The conjugate pairs at |l| = 3 and |l| = L are split across bands, so each
  band edge passes at half amplitude; dc + ac + discarded still reconstructs
  the input exactly, but the bands are not idempotent at the edges.

The packed high-frequency representation stores, as the first 4(L-3) rows of
an (N, C) array, the ac band's own coefficients in the fixed order

    a_3..a_{L-1}, a_{N-L}..a_{N-4}, b_3..b_{L-1}, b_{N-L}..b_{N-4}

followed by all-zero rows.  Unpacking mirrors the two positions that the row
set does not cover (+L and N-3) using real-signal symmetry, which makes
pack -> unpack the identity on the ac subspace for either band mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BAND_MODES = ("symmetric", "literal")


def check_cutoff(L: int, n_frames: int) -> None:
    """Validate the cutoff: L >= 4 and at least 4L frames."""
    if L < 4:
        raise ValueError(f"cutoff L must be >= 4, got {L}")
    if n_frames < 4 * L:
        raise ValueError(f"need at least 4L = {4 * L} frames for L = {L}, got {n_frames}")


@dataclass
class SpectralCoeffs:
    """Cosine/sine coefficients per frequency index, shapes (N, C)."""

    a: np.ndarray
    b: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.a.shape[0]


def analyze(x: np.ndarray) -> SpectralCoeffs:
    """Coefficients of a real signal, columns independent. Needs N >= 16."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if n < 16:
        raise ValueError(f"need at least 16 frames to admit a valid cutoff, got {n}")
    spec = np.fft.fft(x, axis=0)
    return SpectralCoeffs(a=spec.real / n, b=-spec.imag / n)


def synthesize(c: SpectralCoeffs) -> np.ndarray:
    """Inverse of analyze (exact for coefficients of a real signal)."""
    spec = (c.a - 1j * c.b) * c.n_frames
    return np.fft.ifft(spec, axis=0).real


@lru_cache(maxsize=64)
def _transfers(n: int, L: int, mode: str):
    """Per-row amplitude transfer of the dc/ac/discarded band operators."""
    if mode not in BAND_MODES:
        raise ValueError(f"band mode must be one of {BAND_MODES}, got {mode!r}")
    check_cutoff(L, n)
    signed = np.where(np.arange(n) < (n + 1) // 2, np.arange(n), np.arange(n) - n)
    if mode == "symmetric":
        t_dc = (np.abs(signed) <= 2).astype(np.float64)
        t_ac = ((np.abs(signed) >= 3) & (np.abs(signed) <= L - 1)).astype(np.float64)
    else:
        # Signed-set membership averaged with its mirror: Re() of the masked
        # inverse transform has transfer (M(l) + M(-l)) / 2 on real input.
        m_dc = ((signed >= -3) & (signed <= 2)).astype(np.float64)
        m_ac = (((signed >= -L) & (signed <= -4)) | ((signed >= 3) & (signed <= L - 1))).astype(
            np.float64
        )
        flip = np.concatenate([[0], np.arange(n - 1, 0, -1)])
        t_dc = (m_dc + m_dc[flip]) / 2.0
        t_ac = (m_ac + m_ac[flip]) / 2.0
    t_disc = 1.0 - t_dc - t_ac
    for t in (t_dc, t_ac, t_disc):
        t.setflags(write=False)
    return t_dc, t_ac, t_disc


def band_signal(c: SpectralCoeffs, L: int, band: str, mode: str = "symmetric") -> np.ndarray:
    """Time-domain synthesis of one band ("dc", "ac" or "discarded")."""
    idx = {"dc": 0, "ac": 1, "discarded": 2}[band]
    t = _transfers(c.n_frames, L, mode)[idx][:, None]
    return synthesize(SpectralCoeffs(a=c.a * t, b=c.b * t))


@dataclass
class SpectralBands:
    """dc/ac time-domain components plus the packed frequency rows."""

    dc: np.ndarray
    ac: np.ndarray
    F: np.ndarray
    L: int
    mode: str = "symmetric"


def n_coeff_rows(L: int) -> int:
    return 4 * (L - 3)


def pack_freq_repr(c: SpectralCoeffs, L: int, mode: str = "symmetric") -> np.ndarray:
    """Pack the ac band's coefficients into the documented fixed row order."""
    n = c.n_frames
    t_ac = _transfers(n, L, mode)[1][:, None]
    af, bf = c.a * t_ac, c.b * t_ac
    rows = np.concatenate(
        [af[3:L], af[n - L : n - 3], bf[3:L], bf[n - L : n - 3]], axis=0
    )
    out = np.zeros_like(c.a)
    out[: rows.shape[0]] = rows
    return out


@lru_cache(maxsize=64)
def ac_synthesis_basis(n: int, L: int) -> np.ndarray:
    """(N, 4(L-3)) linear map from packed rows to the ac time series.

    Column r is the time series contributed by packed row r, including the
    mirrored contribution of the two positions (+L and N-3) the rows do not
    store; those columns carry a factor 2.
    """
    check_cutoff(L, n)
    u = np.arange(n)[:, None]
    pos = np.concatenate([np.arange(3, L), np.arange(n - L, n - 3)])
    phase = 2.0 * np.pi * pos[None, :] * u / n
    edge = np.where((pos == 3) | (pos == n - L), 2.0, 1.0)
    basis = np.concatenate([np.cos(phase) * edge, np.sin(phase) * edge], axis=1)
    basis.setflags(write=False)
    return basis


def unpack_freq_repr(F: np.ndarray, L: int, n_frames: int) -> np.ndarray:
    """Synthesize the time-domain ac band from packed rows (zero rows ignored)."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    k = n_coeff_rows(L)
    if F.shape[0] < k:
        raise ValueError(f"packed representation needs at least {k} rows, got {F.shape[0]}")
    return ac_synthesis_basis(n_frames, L) @ F[:k]


def split_bands(c: SpectralCoeffs, L: int, mode: str = "symmetric") -> SpectralBands:
    """Split into dc/ac bands (content above the cutoff is dropped)."""
    dc = band_signal(c, L, "dc", mode)
    ac = band_signal(c, L, "ac", mode)
    return SpectralBands(dc=dc, ac=ac, F=pack_freq_repr(c, L, mode), L=L, mode=mode)


def decompose(x: np.ndarray, L: int, mode: str = "symmetric") -> SpectralBands:
    """analyze + split_bands in one call."""
    return split_bands(analyze(x), L, mode)


def recompose(dc: np.ndarray, ac: np.ndarray) -> np.ndarray:
    """Final band-limited signal: dc + ac."""
    dc = np.asarray(dc, dtype=np.float64)
    ac = np.asarray(ac, dtype=np.float64)
    if dc.shape != ac.shape:
        raise ValueError(f"shape mismatch: {dc.shape} vs {ac.shape}")
    return dc + ac


def band_energy(x: np.ndarray, L: int, mode: str = "symmetric") -> dict:
    """Total squared signal per band, summed over frames and columns."""
    c = analyze(x)
    return {
        band: float(np.sum(band_signal(c, L, band, mode) ** 2))
        for band in ("dc", "ac", "discarded")
    }

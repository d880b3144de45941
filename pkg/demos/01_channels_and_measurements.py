"""Walk through one mmWave channel from paths to pilot measurements.

Run: python3 demos/01_channels_and_measurements.py
"""

import numpy as np

from beamwalk import channel as ch
from beamwalk import measurement as ms

N, N_RF, M = 64, 16, 4

# A lens array turns the spatial channel into beamspace with a unitary DFT.
book = ch.lens_codebook(N)
print(f"codebook unitarity error: {np.abs(book.u.conj().T @ book.u - np.eye(N)).max():.1e}")

# Three SV paths; most of the beamspace energy lands on a handful of beams.
rng = ch.make_rng(7)
real = ch.gen_sv_channel(N, 3, rng, book)
energy = np.sort(np.abs(real.beamspace) ** 2)[::-1]
top = np.cumsum(energy) / energy.sum()
print(f"beams holding 95% of the energy: {int(np.searchsorted(top, 0.95)) + 1} of {N}")
for p in real.paths:
    print(f"  path gain |{abs(p.gain):.2f}| at direction theta={p.theta:+.3f}")

# An on-grid path collapses onto a single beam.
on_grid = ch.realization_from_paths([ch.PathParams(1.0, float(book.grid[20]))], N, book)
print(f"on-grid path: strongest beam holds {np.max(np.abs(on_grid.beamspace) ** 2) / np.sum(np.abs(on_grid.beamspace) ** 2):.6f} of the energy")

# One-bit phase-shifter combiners stacked over M pilot slots: M*N_RF = N rows.
sel = ms.gen_selection_matrix(N, N_RF, M, rng)
print(f"selection matrix {sel.stacked.shape}, entries +-{np.abs(sel.stacked).max():.4f}")

# SNR is set against the average channel energy N; averaging over many
# channels and noise draws the measured SNR tracks the nominal one; the
# remaining fraction of a dB comes from the single fixed W.
hs = [ch.gen_sv_channel(N, 3, rng, book).beamspace for _ in range(200)]
for snr in (0.0, 10.0, 20.0):
    sig = noise = 0.0
    for i, h in enumerate(hs):
        clean = sel.stacked @ h
        y = ms.measure(sel, h, snr, noise_seed=i).y
        sig += np.sum(np.abs(clean) ** 2)
        noise += np.sum(np.abs(y - clean) ** 2)
    print(f"nominal SNR {snr:4.1f} dB -> measured {10 * np.log10(sig / noise):5.2f} dB over {len(hs)} channels")

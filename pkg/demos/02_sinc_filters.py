"""
Band-pass filters that learn only their edges
==============================================

The first layer of the encoder is a bank of windowed sinc band-pass filters.
Each filter has two numbers, a low and a high cutoff; the taps follow from
them.  Here we look at one filter and at the initial bank.
"""

import numpy as np
from lim.encoder import EncoderConfig, init_encoder, mel_cutoffs, sinc_filters, sinc_taps

# cutoffs are in cycles per sample: 0.05..0.15 is 800..2400 Hz at 16 kHz
taps = sinc_taps(0.05, 0.15, 251)
print("taps symmetric:", np.array_equal(taps, taps[::-1]))
print("centre tap", taps[125], "= 2 * (f2 - f1) =", 2 * (0.15 - 0.05))

# magnitude response on a fine grid
n_fft = 4096
mag = np.abs(np.fft.rfft(taps, n_fft))
freqs = np.fft.rfftfreq(n_fft)
for f in (0.02, 0.05, 0.10, 0.15, 0.20, 0.30):
    db = 20 * np.log10(mag[np.argmin(np.abs(freqs - f))] + 1e-12)
    print(f"  {f * 16000:6.0f} Hz  {db:7.1f} dB")

# an empty band gives silence
print("zero-width band is all zeros:", not np.any(sinc_taps(0.2, 0.2, 51)))

# The bank starts with cutoffs evenly spaced on the mel scale, so low
# frequencies get narrow filters and high frequencies wide ones.
low, band = mel_cutoffs(10, 30, 7950, 16000)
print("\ninitial bank (Hz):")
for lo, bw in zip(low, band):
    print(f"  {lo * 16000:7.0f} .. {(lo + bw) * 16000:7.0f}")

# The same taps come out of the encoder's parameters.
params = init_encoder(0, EncoderConfig.desk())
bank = sinc_filters(params).data
print("\nencoder bank shape", bank.shape)

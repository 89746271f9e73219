"""
One-bit gradients on the wire
=============================

A gradient is zero-meaned, perturbed with Gaussian noise and reduced to its
signs. The signs are packed eight to a byte behind a 13-byte header.
"""

import numpy as np

from gossip_dfl.numerics import SeededRng
from gossip_dfl.quantize import (NoiseSpec, decode_message, dense_payload_bytes, dpsign,
                                 encode_message, majority_vote, payload_bytes, zero_mean)

rng = SeededRng(0)
g = rng.normal(0.0, 1.0, 10_000)

# noise-free quantization is just the sign (zero counts as +1)
q = dpsign(zero_mean(g), NoiseSpec(0.0), rng.child(1))
print("agreement with np.sign:", np.mean(q.signs() == np.sign(zero_mean(g))))

# with noise, small coordinates flip more often than large ones
noisy = dpsign(zero_mean(g), NoiseSpec(1.0), rng.child(2))
flipped = noisy.signs() != q.signs()
print("flip rate |g|<0.2 : %.3f" % flipped[np.abs(g) < 0.2].mean())
print("flip rate |g|>2   : %.3f" % flipped[np.abs(g) > 2].mean())

buf = encode_message(noisy, round_no=7, sender=3)
round_no, sender, back = decode_message(buf)
print("decoded", round_no, sender, back == noisy)
print("bytes: %d quantized vs %d dense (%.1fx)" % (
    payload_bytes(noisy), dense_payload_bytes(g.size), dense_payload_bytes(g.size) / payload_bytes(noisy)))

# three voters; ties go to +1
votes = [dpsign(zero_mean(g), NoiseSpec(1.0), rng.child(10, i)) for i in range(3)]
print("majority agrees with clean sign on %.3f of coordinates"
      % np.mean(majority_vote(votes).signs() == q.signs()))

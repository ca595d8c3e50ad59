"""
Three ways to run a state-space model
=====================================

A diagonal linear system can be stepped token by token, unrolled into a
convolution kernel, or evaluated with an associative prefix scan. This demo
runs all three on one random system and prints how far apart they are.
"""

import numpy as np

from mambair.selftest import random_lti, random_selective
from mambair.ssm import (discretize_zoh, selective_scan_parallel, selective_scan_sequential, ssm_convolutional,
                         ssm_kernel, ssm_recurrent)

rng = np.random.default_rng(0)

# a stable system: negative diagonal state matrix, one step size, one input sequence
params, delta, x = random_lti(rng, max_state=6, max_len=40)
disc = discretize_zoh(params, delta)
print(f"state size {params.A.size}, sequence length {x.size}, step {delta:.3f}")
print("discrete decay factors:", np.round(disc.A_bar, 4))

# recurrent form: one state update per token
recurrent = ssm_recurrent(disc, params.C, params.D, x)

# convolutional form: the impulse response, then a causal convolution
kernel = ssm_kernel(disc, params.C, x.size)
print("first kernel taps:", np.round(kernel[:4], 5))
convolutional = ssm_convolutional(params, delta, x)
print(f"max |recurrent - convolutional| = {np.max(np.abs(recurrent - convolutional)):.2e}")

# selective form: step size and projections change per token
sel, tokens = random_selective(rng, max_state=6, max_len=40, max_channels=3)
sequential = selective_scan_sequential(sel, tokens)
parallel = selective_scan_parallel(sel, tokens)
print(f"selective scan, {tokens.shape[0]} tokens x {tokens.shape[1]} channels: "
      f"max |parallel - sequential| = {np.max(np.abs(parallel - sequential)):.2e}")

# the parallel scan splits channels across workers; results do not depend on how many
same = all(np.array_equal(parallel, selective_scan_parallel(sel, tokens, workers=w)) for w in (2, 3))
print("bit-identical for 2 and 3 workers:", same)

"""
Effective receptive field of the toy network
============================================

The gradient of one output pixel with respect to every input pixel shows which
inputs the network can see. Four-direction scanning gives every pixel a path
to every other, while a plain stack of 3x3 convolutions only reaches a box
around the centre. The maps are written as PGM images (dark = strong).
"""

import numpy as np

from mambair.blocks import ModelConfig, init_state
from mambair.diagnostics import compute_erf, conv_stack_forward, erf_pgm, init_conv_stack, model_fn, reach_box
from mambair.pipeline.imageio import image_write

size = (16, 16)

# untrained toy model, fed a flat gray image
model = model_fn(init_state(ModelConfig(), seed=0))
erf = compute_erf(model, size)
print(f"toy model: {np.count_nonzero(erf.raw > 1e-12)}/256 input pixels influence the centre output")
print(f"weakest influence {erf.raw.min():.2e}, strongest {erf.raw.max():.2e}")

# a four-layer conv stack of the same width can only reach four pixels away
weights = init_conv_stack(4, 16, seed=0)
conv = compute_erf(lambda x: conv_stack_forward(x, weights), size)
box = reach_box(size, 4)
print(f"conv stack: {np.count_nonzero(conv.support())} pixels reached, "
      f"{np.count_nonzero(conv.support() & ~box)} outside its 9x9 reach box")

image_write("erf_model.pgm", erf_pgm(erf))
image_write("erf_conv.pgm", erf_pgm(conv))
print("wrote erf_model.pgm and erf_conv.pgm")

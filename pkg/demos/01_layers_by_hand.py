"""
Dilated convolutions and max-pooling, by hand
=============================================

A tiny walk through the building blocks: a dilated 1-D convolution on a
five-slice signal, what the receptive field looks like, and how global
max-pooling turns any number of slices into a fixed-size vector.
"""

import numpy as np

from msnet.tensor import conv1d_forward, global_maxpool_forward
from msnet.model import MsNetArch, receptive_field

# one channel in, one channel out, a width-3 kernel of ones
x = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
w = np.ones((3, 1, 1))
b = np.zeros(1)

# with dilation 1 each output sums a slice and its two neighbours
print("dilation 1:", conv1d_forward(x, w, b, dilation=1).ravel())

# with dilation 2 the taps skip a slice; zeros pad both ends
print("dilation 2:", conv1d_forward(x, w, b, dilation=2).ravel())

# stacking blocks with dilations 1, 2, 4, 8 grows the window quickly
for n in range(5):
    arch = MsNetArch(block_count=n)
    print(f"{n} blocks, dilations {arch.dilations}: receptive field {receptive_field(arch)} slices")

# max-pooling collapses the slice axis, so 7 slices and 700 slices give the same shape
rng = np.random.default_rng(0)
for l in (7, 700):
    pooled, where = global_maxpool_forward(rng.normal(size=(l, 4)))
    print(f"l={l}: pooled shape {pooled.shape}, winning slices {where}")

"""
Checking gradients and saving a model
=====================================

Backpropagation here is written by hand, so it is worth comparing against
central finite differences.  A shrunken network keeps the check quick.
Then we save a checkpoint, reload it and confirm nothing changed.
"""

import tempfile
from pathlib import Path

import numpy as np

from msnet.gradcheck import SHRUNK_ARCH, layer_checks, model_check
from msnet.model import MsNetArch, init_model, load_checkpoint, param_count, save_checkpoint

r = model_check(SHRUNK_ARCH, length=40, seed=0)
print(f"full model, 8 input channels, 40 slices: max relative error {r.max_rel_error:.2e}")

worst = max(layer_checks(40, seed=1), key=lambda c: c.max_rel_error)
print(f"worst of 40 layer checks: {worst.name} at {worst.max_rel_error:.2e}")

print(f"default network has {param_count(MsNetArch()):,} parameters")

model = init_model(seed=3)
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "demo.msnt"
    save_checkpoint(model, path)
    print(f"checkpoint is {path.stat().st_size:,} bytes")
    again = load_checkpoint(path)

x = np.random.default_rng(0).normal(size=(150, 2048)).astype(np.float32)
print("identical predictions after reload:",
      model.forward(x)[0].tobytes() == again.forward(x)[0].tobytes())

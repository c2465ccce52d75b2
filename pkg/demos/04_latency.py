"""
How fast is aggregation?
========================

Time the forward pass alone on volumes of 100 to 200 slices, the way a
deployed system would run it once features are already extracted.
"""

from msnet.data import SynthConfig, generate_synthetic
from msnet.model import init_model
from msnet.train import benchmark

vols = [v for v, _ in generate_synthetic(SynthConfig(patients_per_class=(20, 20, 20), seed=4))]
res = benchmark(init_model(seed=0), vols, repetitions=3)
t = res.timing
print(f"{t.n_volumes} volumes x {t.repetitions} runs")
print(f"mean {1e3 * t.mean_seconds:.2f} ms, p50 {1e3 * t.p50_seconds:.2f} ms, p95 {1e3 * t.p95_seconds:.2f} ms")
print("same predictions every run:", res.deterministic)

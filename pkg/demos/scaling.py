"""
How forward time grows with image size
======================================

Scanning costs time proportional to the number of pixels; full self-attention
compares every pixel with every other. Fitting log(time) against log(pixels)
over a few image sizes should give a slope near one for the scanning model and
near two for attention. Two calibration workloads with known costs show how
well this machine measures those slopes.
"""

from mambair.blocks import ModelConfig, init_state
from mambair.diagnostics import bench_csv, bench_workloads, calibration_workloads, complexity_bench

sizes = (48, 60, 72, 84, 96)

records, slopes = complexity_bench(init_state(ModelConfig(), seed=0), sizes)
print(bench_csv(records))
for name, slope in slopes.items():
    print(f"{name:15s} slope {slope:.3f}")

# the calibration fits need more rounds: their acceptance windows are narrow
_, calib = bench_workloads(calibration_workloads(0), sizes, repeats=15, measure_memory=False)
for name, slope in calib.items():
    print(f"{name:15s} slope {slope:.3f}")

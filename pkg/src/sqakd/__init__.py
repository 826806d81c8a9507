"""Quantization-aware training with a frozen full-precision teacher.

Subpackages:

- ``tensor``: reverse-mode autodiff over NumPy arrays
- ``kernels``: convolution kernels (compiled extension or NumPy fallback)
- ``quantizers``: parametric clip/round quantizers with pluggable backward rules
- ``losses``: cross-entropy, temperature-softened KL, and their mixture
- ``network`` / ``training``: layer stacks, fake-quantized training loops
- ``oracles``: finite-difference, level-set, and loss-landscape verification
- ``data`` / ``checkpoint`` / ``config`` / ``cli``: experiment harness
"""

__version__ = "0.1.0"

"""
Sparse fine-tuning and sparse inference lab: pruning, SquareHead distillation, a tiny
manually differentiated model, bitmask-compressed kernels and INT8 quantization.
"""

__version__ = "0.1"

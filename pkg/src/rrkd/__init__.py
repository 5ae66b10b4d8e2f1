"""Attention-transfer distillation from residual teachers into weight-tied recurrent students.

A small numpy autodiff engine with a compiled convolution-lowering core.
"""

from .kernels import BACKEND
from .nn import ArchSpec, count_parameters
from .recurrence import build_student, build_teacher, make_schedule

__version__ = "0.1.0"

__all__ = ["ArchSpec", "BACKEND", "build_student", "build_teacher", "count_parameters", "make_schedule",
           "__version__"]

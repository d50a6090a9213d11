"""glyphforge: paired glyph style transfer with a conditional adversarial
U-Net trained from a tiny built-in autodiff engine."""

__version__ = "0.1.0"

from . import ndgrad  # noqa: F401
from .ndgrad import RngState, Tensor  # noqa: F401

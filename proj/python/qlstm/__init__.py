"""Low-bit quantized LSTM language models trained with ADMM."""

from ._qlstm import *  # noqa: F401,F403
from ._qlstm import __doc__  # noqa: F401

__version__ = "0.1.0"

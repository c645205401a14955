"""Explain-then-predict commonsense validation, C++ core bindings."""

from ._erp import *  # noqa: F401,F403
from ._erp import __doc__  # noqa: F401

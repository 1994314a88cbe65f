"""Attention-similarity backdoor forensics and head-level sanitization."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401

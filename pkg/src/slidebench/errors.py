"""Shared exception hierarchy.

Every anticipated pipeline failure derives from PipelineError so the CLI can
map data problems to exit status 1 while genuine bugs surface as ordinary
tracebacks. Module-specific subclasses live next to the code that raises
them; only cross-module errors are defined here.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all expected failure modes."""


class IoError(PipelineError):
    """Output file or directory could not be written."""

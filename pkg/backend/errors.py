#!/usr/bin/env python3
"""
errors.py — Exception hierarchy shared by every testbed module.

Configuration and input problems are ValueErrors, broken internal contracts and
diverged runs are RuntimeErrors, so callers that only know the built-ins still
catch them sensibly.
"""
from __future__ import annotations

from typing import Optional


class VFLError(Exception):
    """Base class for every error raised by the testbed."""


class ConfigurationError(VFLError, ValueError):
    """Invalid configuration: dimensions, ranges, unknown keys, bad quotas."""


class InputError(VFLError, ValueError):
    """Invalid caller input: empty sets, out-of-range labels."""


class IngestionError(InputError):
    """A dataset file does not match the pinned preprocessing manifest."""

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class InternalError(VFLError, RuntimeError):
    """An internal contract was broken (stale cache, duplicate trace entry)."""


class DivergenceError(VFLError, RuntimeError):
    """Training produced a non-finite loss or parameter."""

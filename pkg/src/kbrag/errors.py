"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 2, GatewayError -> 3,
plain I/O failures -> 4.
"""

from __future__ import annotations


class KbragError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(KbragError):
    """Malformed input files, broken invariants, or bad configuration."""


class GatewayError(KbragError):
    """Base class for model-backend failures."""


class GatewayConnectionError(GatewayError):
    """Backend unreachable after the configured retries."""


class GatewayProtocolError(GatewayError):
    """Backend reachable but the exchange violated the wire contract."""

"""Deadline-bounded, jittered retry for fabric rendezvous connections."""

import errno
import logging
import random
import socket
import time
from typing import Callable, Optional, Tuple

from clinical_lm.errors import FabricError

logger = logging.getLogger(__name__)

RETRY_BASE_DELAY_SECONDS = 0.05
RETRY_MAX_DELAY_SECONDS = 1.0
RETRY_JITTER_SECONDS = 0.05

_RETRYABLE_ERRNOS = frozenset(
    {
        errno.ECONNREFUSED,
        errno.ECONNRESET,
        errno.ECONNABORTED,
        errno.EHOSTUNREACH,
        errno.ENETUNREACH,
        errno.ETIMEDOUT,
        errno.EAGAIN,
    }
)


def is_retryable_exception(exc: BaseException) -> bool:
    """Whether a connect failure may succeed once the hub is listening."""
    if isinstance(exc, (ConnectionRefusedError, ConnectionResetError,
                        ConnectionAbortedError, socket.timeout)):
        return True
    if isinstance(exc, OSError) and exc.errno in _RETRYABLE_ERRNOS:
        return True
    return False


def calculate_retry_delay(
    retry_number: int,
    *,
    remaining_timeout: Optional[float] = None,
) -> float:
    """Return a jittered, bounded delay for the next retry attempt."""
    delay = RETRY_BASE_DELAY_SECONDS * (2 ** max(0, retry_number))
    delay = min(delay, RETRY_MAX_DELAY_SECONDS)
    delay += random.uniform(0.0, RETRY_JITTER_SECONDS)
    delay = min(delay, RETRY_MAX_DELAY_SECONDS)
    if remaining_timeout is not None:
        delay = min(delay, max(0.0, remaining_timeout))
    return max(0.0, delay)


def _deadline(timeout: Optional[float]) -> Optional[float]:
    if isinstance(timeout, bool) or not isinstance(timeout, (int, float)):
        return None
    if timeout <= 0:
        return None
    return time.monotonic() + float(timeout)


def _remaining_timeout(deadline: Optional[float]) -> Optional[float]:
    if deadline is None:
        return None
    return max(0.0, deadline - time.monotonic())


def connect_with_retry(
    address: Tuple[str, int],
    timeout: Optional[float],
    connect: Callable[..., socket.socket] = socket.create_connection,
    sleep: Callable[[float], None] = time.sleep,
) -> socket.socket:
    """
    Connect to ``address``, retrying refused/reset connections with
    exponential backoff until ``timeout`` seconds have elapsed.
    """
    deadline = _deadline(timeout)
    retry_number = 0
    host, port = address
    while True:
        remaining = _remaining_timeout(deadline)
        try:
            return connect(address, timeout=remaining if remaining else None)
        except OSError as exc:
            remaining = _remaining_timeout(deadline)
            if not is_retryable_exception(exc):
                raise FabricError(f"cannot connect to {host}:{port}: {exc}") from exc
            if remaining is not None and remaining <= 0:
                raise FabricError(
                    f"cannot connect to {host}:{port} within {timeout}s: {exc}"
                ) from exc
            delay = calculate_retry_delay(retry_number, remaining_timeout=remaining)
            logger.warning(
                "Retrying fabric connect address=%s:%s attempt=%s delay=%.3fs error=%s",
                host,
                port,
                retry_number + 2,
                delay,
                type(exc).__name__,
            )
            if delay > 0:
                sleep(delay)
            retry_number += 1

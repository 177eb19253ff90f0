import logging
import time
from typing import Callable, TypeVar

import httpx

from scotopic.errors import StageError

logger = logging.getLogger(__name__)

T = TypeVar("T")


def run_stage(name: str, func: Callable[..., T], *args, timings: dict | None = None, **kwargs) -> T:
    """
    Runs one pipeline stage, logging start/end and wall-clock.
    Any failure is re-raised as StageError tagged with the stage name.
    """
    logger.info(f"Stage {name} started")
    start = time.perf_counter()
    try:
        result = func(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:
        elapsed = time.perf_counter() - start
        logger.error(f"Stage {name} failed after {elapsed:.2f}s: {e}")
        raise StageError(name, e) from e
    elapsed = time.perf_counter() - start
    if timings is not None:
        timings[name] = round(elapsed, 3)
    logger.info(f"Stage {name} finished in {elapsed:.2f}s")
    return result


def is_retryable_error(e: Exception) -> bool:
    """
    Transient download failures: connection problems, 429 and 5xx responses.
    """
    if isinstance(e, httpx.TransportError):
        return True
    if isinstance(e, httpx.HTTPStatusError):
        status = e.response.status_code
        return status == 429 or status >= 500
    return False


def run_with_retry_sync(
    func: Callable[..., T],
    *args,
    max_retries: int = 3,
    initial_delay: float = 2.0,
    **kwargs
) -> T:
    """
    Retries a synchronous call with exponential backoff on transient errors.
    """
    attempt = 0
    while True:
        try:
            return func(*args, **kwargs)
        except Exception as e:
            if not is_retryable_error(e):
                raise

            attempt += 1
            if attempt > max_retries:
                logger.error(f"Max retries ({max_retries}) exceeded for {func.__name__}. Last error: {e}")
                raise

            delay = initial_delay * (2 ** (attempt - 1))
            logger.warning(
                f"Retryable error in {func.__name__} (attempt {attempt}/{max_retries}): {e}. "
                f"Retrying in {delay:.2f}s..."
            )
            time.sleep(delay)

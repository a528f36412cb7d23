"""Shared error handling for command handlers."""
from __future__ import annotations

from functools import wraps
from typing import Callable, Iterable, TypeVar

from ..core import ValidationError, VitZslError

F = TypeVar("F", bound=Callable[..., int])

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_INPUT = 2


def exit_code_for(exc: BaseException) -> int:
    """Invalid input maps to 2, every other failure to 1."""
    return EXIT_INVALID_INPUT if isinstance(exc, ValidationError) else EXIT_FAILURE


def wrap_command_errors(
    logger,
    message: str,
    *,
    pass_through: Iterable[type[BaseException]] = (),
) -> Callable[[F], F]:
    """Log a command's failure with a consistent message and turn it into an exit code."""
    pass_through_exceptions = tuple(pass_through)

    def decorator(func: F) -> F:
        @wraps(func)
        def wrapper(*args, **kwargs) -> int:
            try:
                result = func(*args, **kwargs)
            except pass_through_exceptions:
                raise
            except VitZslError as exc:
                logger.error(f"{message}: {exc}")
                logger.debug(f"{message} details: {exc.to_dict()}")
                return exit_code_for(exc)
            except OSError as exc:
                logger.error(f"{message}: {exc}")
                return EXIT_FAILURE
            except Exception as exc:
                logger.exception(f"{message}: unexpected {type(exc).__name__}: {exc}")
                return EXIT_FAILURE
            return EXIT_OK if result is None else int(result)

        return wrapper  # type: ignore[return-value]

    return decorator

# src/error_handler.py
import logging
import time
import json
from datetime import datetime
from typing import Callable, Any, Optional


class AdaFocusError(Exception):
    """Base class for every failure raised by the pipeline"""
    exit_code = 1


class ValidationError(AdaFocusError):
    """Bad input: shapes, configs, labels, distributions"""
    exit_code = 1


class ShapeError(ValidationError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class ConfigError(ValidationError):
    pass


class NumericError(AdaFocusError):
    """Non-finite loss or gradient"""
    exit_code = 2

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        super().__init__(message)


class StorageError(AdaFocusError):
    exit_code = 3


class FormatError(StorageError):
    def __init__(self, message: str, offset: Optional[int] = None,
                 expected: Optional[int] = None, actual: Optional[int] = None):
        self.offset = offset
        self.expected = expected
        self.actual = actual
        details = []
        if offset is not None:
            details.append(f"at byte {offset}")
        if expected is not None:
            details.append(f"expected {expected} bytes")
        if actual is not None:
            details.append(f"got {actual} bytes")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class ErrorHandler:
    TRANSIENT = ('io_error', 'timeout_error')
    DATA = ('data_validation_error', 'policy_warning')
    CRITICAL = ('numeric_error', 'configuration_error', 'file_not_found')
    CRITICAL_EXCEPTIONS = {
        'numeric_error': NumericError,
        'configuration_error': ConfigError,
        'file_not_found': StorageError,
    }

    def __init__(self, base_delay: float = 1.0, max_retries: int = 3):
        self.error_count = 0
        self.error_types = {}
        self.retry_attempts = {}
        self.base_delay = base_delay
        self.max_retries = max_retries
        self.logger = logging.getLogger(__name__)

    def handle_error(self, error_type: str, error_message: str, context: dict = None,
                     operation: Callable = None):
        """Handle different types of errors with appropriate strategies"""
        self.error_count += 1
        self.error_types[error_type] = self.error_types.get(error_type, 0) + 1
        self.logger.error(f"{error_type}: {error_message} {context or ''}".rstrip())

        if error_type in self.TRANSIENT:
            if operation:
                return self.retry_operation(operation, error_type, max_retries=self.max_retries)
            self.logger.warning(f"No operation provided for {error_type}, continuing...")
            return True
        if error_type in self.DATA:
            self.logger.warning(f"Data error - continuing: {error_message}")
            return None
        if error_type in self.CRITICAL:
            self.logger.critical(f"Critical error - cannot continue: {error_message}")
            raise self.CRITICAL_EXCEPTIONS[error_type](f"Critical error: {error_message}")

        self.logger.warning(f"Unhandled error type {error_type}, continuing...")
        return True

    def retry_operation(self, operation: Callable, error_type: str, max_retries: int = 3):
        """Retry failed operations with exponential backoff"""
        last_error = None
        for attempt in range(max_retries):
            wait_time = self.base_delay * 2 ** attempt
            self.logger.info(f"Retry {attempt + 1}/{max_retries} for {error_type} after {wait_time}s")
            time.sleep(wait_time)
            try:
                result = operation()
                self.logger.info(f"Retry {attempt + 1} successful")
                return result
            except OSError as e:
                last_error = e
                self.logger.warning(f"Retry {attempt + 1} failed: {e}")
                self.retry_attempts[error_type] = self.retry_attempts.get(error_type, 0) + 1

        self.logger.error(f"Operation failed after {max_retries} retries")
        raise StorageError(f"{error_type}: giving up after {max_retries} retries: {last_error}")

    def run_io(self, operation: Callable[[], Any], description: str) -> Any:
        """Run a file operation, retrying transient OS errors"""
        try:
            return operation()
        except FileNotFoundError as e:
            self.error_count += 1
            self.error_types['file_not_found'] = self.error_types.get('file_not_found', 0) + 1
            raise StorageError(f"{description}: {e}") from e
        except OSError as e:
            return self.handle_error('io_error', f"{description}: {e}", operation=operation)

    @staticmethod
    def exit_code_for(error: BaseException) -> int:
        if isinstance(error, AdaFocusError):
            return error.exit_code
        if isinstance(error, OSError):
            return StorageError.exit_code
        return 1

    def record(self, error: AdaFocusError):
        """Count an error raised elsewhere without applying a strategy"""
        error_type = type(error).__name__
        self.error_count += 1
        self.error_types[error_type] = self.error_types.get(error_type, 0) + 1

    def get_error_report(self):
        total_retries = sum(self.retry_attempts.values())
        return {
            'summary': {
                'total_errors': self.error_count,
                'unique_error_types': len(self.error_types),
                'total_retry_attempts': total_retries
            },
            'error_breakdown': self.error_types,
            'retry_breakdown': self.retry_attempts,
            'most_common_error': max(self.error_types, key=self.error_types.get) if self.error_types else None,
            'generated_at': datetime.now().isoformat()
        }

    def export_error_report(self, filename='errors.json'):
        """Export error analysis to JSON"""
        report = self.get_error_report()
        with open(filename, 'w') as f:
            json.dump(report, f, indent=2)
        self.logger.info(f"Error analysis exported to {filename}")
        return report

import json

import pytest

from error_handler import (AdaFocusError, ConfigError, ErrorHandler, FormatError, NumericError, ShapeError,
                           StorageError, ValidationError)


@pytest.fixture
def handler():
    return ErrorHandler(base_delay=0.0, max_retries=2)


def test_exit_codes():
    assert ValidationError.exit_code == 1
    assert ShapeError('op', (1,), (2,)).exit_code == 1
    assert NumericError('boom').exit_code == 2
    assert FormatError('bad').exit_code == 3
    assert ErrorHandler.exit_code_for(OSError('disk')) == 3
    assert ErrorHandler.exit_code_for(KeyError('x')) == 1


def test_format_error_message():
    error = FormatError('short read', offset=12, expected=8, actual=3)
    assert str(error) == 'short read (at byte 12, expected 8 bytes, got 3 bytes)'
    assert isinstance(error, StorageError)


def test_numeric_error_carries_name():
    assert NumericError('nan', name='l_spatial').name == 'l_spatial'


@pytest.mark.parametrize('error_type, exc', [
    ('numeric_error', NumericError),
    ('configuration_error', ConfigError),
    ('file_not_found', StorageError),
])
def test_critical_errors_raise_domain_exceptions(handler, error_type, exc):
    with pytest.raises(exc):
        handler.handle_error(error_type, 'stop')
    assert handler.error_types[error_type] == 1


def test_data_errors_continue(handler):
    assert handler.handle_error('policy_warning', 'recall low') is None
    assert handler.error_count == 1


def test_transient_error_retries_until_success(handler):
    calls = []

    def flaky():
        calls.append(1)
        if len(calls) < 2:
            raise OSError('busy')
        return 'ok'
    assert handler.handle_error('io_error', 'first try failed', operation=flaky) == 'ok'
    assert handler.retry_attempts['io_error'] == 1


def test_retries_give_up_with_storage_error(handler):
    def broken():
        raise OSError('gone')
    with pytest.raises(StorageError):
        handler.handle_error('io_error', 'failing', operation=broken)
    assert handler.retry_attempts['io_error'] == 2


def test_run_io_wraps_missing_file(handler, tmp_path):
    def read():
        with open(tmp_path / 'none', 'rb') as f:
            return f.read()
    with pytest.raises(StorageError):
        handler.run_io(read, 'reading none')
    assert handler.error_types['file_not_found'] == 1


def test_run_io_retries_other_os_errors(handler):
    attempts = []

    def op():
        attempts.append(1)
        if len(attempts) == 1:
            raise PermissionError('locked')
        return 42
    assert handler.run_io(op, 'op') == 42


def test_report_export(handler, tmp_path):
    handler.record(NumericError('nan'))
    handler.handle_error('policy_warning', 'x')
    handler.handle_error('policy_warning', 'y')
    path = tmp_path / 'errors.json'
    report = handler.export_error_report(str(path))
    assert report['summary']['total_errors'] == 3
    assert report['most_common_error'] == 'policy_warning'
    assert json.loads(path.read_text())['error_breakdown'] == {'NumericError': 1, 'policy_warning': 2}


def test_everything_derives_from_one_base():
    for exc in (ValidationError, ConfigError, NumericError, StorageError, FormatError):
        assert issubclass(exc, AdaFocusError)

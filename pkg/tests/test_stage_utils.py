import pytest
import httpx
from unittest.mock import MagicMock, patch
from scotopic.errors import StageError
from scotopic.stage_utils import is_retryable_error, run_stage, run_with_retry_sync


def _status_error(code):
    request = httpx.Request("GET", "http://example.com")
    return httpx.HTTPStatusError(f"{code}", request=request, response=httpx.Response(code, request=request))


def test_run_stage_records_timing():
    timings = {}
    assert run_stage("add", lambda a, b: a + b, 1, 2, timings=timings) == 3
    assert "add" in timings
    assert timings["add"] >= 0


def test_run_stage_tags_failures():
    def boom():
        raise ValueError("bad input")

    with pytest.raises(StageError) as excinfo:
        run_stage("train", boom)
    assert excinfo.value.stage == "train"
    assert isinstance(excinfo.value.__cause__, ValueError)
    assert str(excinfo.value) == "[train] ValueError: bad input"


def test_nested_stage_error_keeps_inner_name():
    def inner():
        run_stage("inner", lambda: 1 / 0)

    with pytest.raises(StageError) as excinfo:
        run_stage("outer", inner)
    assert excinfo.value.stage == "inner"


def test_is_retryable_error():
    assert is_retryable_error(httpx.ConnectError("refused"))
    assert is_retryable_error(_status_error(429))
    assert is_retryable_error(_status_error(503))
    assert not is_retryable_error(_status_error(404))
    assert not is_retryable_error(ValueError("429 in the message is not enough"))


def test_run_with_retry_sync_success():
    mock_func = MagicMock(return_value="success")
    result = run_with_retry_sync(mock_func)
    assert result == "success"
    assert mock_func.call_count == 1


def test_run_with_retry_sync_failure_then_success():
    mock_func = MagicMock(side_effect=[httpx.ReadTimeout("slow"), "success"])
    mock_func.__name__ = "mock_func"
    result = run_with_retry_sync(mock_func, max_retries=2, initial_delay=0.01)
    assert result == "success"
    assert mock_func.call_count == 2


def test_run_with_retry_sync_max_retries_exceeded():
    mock_func = MagicMock(side_effect=_status_error(500))
    mock_func.__name__ = "mock_func"
    with patch("time.sleep") as mock_sleep:
        with pytest.raises(httpx.HTTPStatusError):
            run_with_retry_sync(mock_func, max_retries=2, initial_delay=1.0)
    assert mock_func.call_count == 3  # Initial + 2 retries
    assert [call.args[0] for call in mock_sleep.call_args_list] == [1.0, 2.0]


def test_run_with_retry_sync_does_not_retry_client_errors():
    mock_func = MagicMock(side_effect=_status_error(404))
    mock_func.__name__ = "mock_func"
    with pytest.raises(httpx.HTTPStatusError):
        run_with_retry_sync(mock_func, max_retries=3, initial_delay=0.01)
    assert mock_func.call_count == 1

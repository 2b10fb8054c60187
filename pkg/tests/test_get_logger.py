import logging
import sys

from layer_rsa.get_logger import get_logger


class TestGetLogger:
    def test_single_handler_on_stderr(self):
        first = get_logger("layer_rsa.test_logger", logging.DEBUG)
        second = get_logger("layer_rsa.test_logger", logging.DEBUG)
        assert first is second
        assert len(first.handlers) == 1
        assert first.handlers[0].stream is sys.stderr
        assert not first.propagate

    def test_nothing_on_stdout(self, capsys):
        get_logger("layer_rsa.test_quiet").info("hello")
        assert capsys.readouterr().out == ""

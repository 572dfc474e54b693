# logging_config.py
"""Sets up rotating file and console logging for windgen runs."""

import logging
import os
from logging.handlers import RotatingFileHandler

NOISY_LOGGERS = ["torch", "urllib3"]
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'


class ConsoleFormatter(logging.Formatter):
    """Keeps console records on one line; tracebacks only reach the log file."""

    def format(self, record):
        saved = record.exc_info, record.exc_text, record.stack_info
        record.exc_info = record.exc_text = record.stack_info = None
        try:
            return super().format(record)
        finally:
            record.exc_info, record.exc_text, record.stack_info = saved


def setup_logging(log_file=None, log_level=None):
    log_file = log_file or os.getenv('LOG_FILE', '/tmp/windgen.log')
    log_level = (log_level or os.getenv('LOG_LEVEL', 'INFO')).upper()
    level = getattr(logging, log_level, logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT)

    handlers = []
    log_dir = os.path.dirname(log_file)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
    file_handler = RotatingFileHandler(log_file, maxBytes=10*1024*1024, backupCount=5)
    handlers.append(file_handler)

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(ConsoleFormatter(LOG_FORMAT))
    handlers.append(stream_handler)

    root_logger = logging.getLogger()
    for h in list(root_logger.handlers):
        root_logger.removeHandler(h)
    for h in handlers:
        h.setLevel(level)
        if h.formatter is None:
            h.setFormatter(formatter)
        root_logger.addHandler(h)
    root_logger.setLevel(level)

    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
    return root_logger

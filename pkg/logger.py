import logging
import sys
from config import Config


def log_level() -> int:
    """DEBUG=true wins over LOG_LEVEL"""
    if Config.DEBUG:
        return logging.DEBUG
    return getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO)


def setup_logger():
    """Setup application logging"""

    # Create logger
    logger = logging.getLogger("corld")
    level = log_level()
    logger.setLevel(level)

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    console_handler.setFormatter(formatter)

    if not logger.handlers:
        logger.addHandler(console_handler)

    return logger

# Global logger instance
logger = setup_logger()

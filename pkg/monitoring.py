import time
import psutil
from typing import Dict, Any, Optional
from datetime import datetime
from functools import wraps

from logger import logger


class PerformanceMonitor:
    """Wall-clock and memory accounting for training epochs and harness arms"""

    def __init__(self):
        self.metrics: Dict[str, Any] = {
            'epoch_count': 0,
            'total_epoch_time': 0.0,
            'average_epoch_time': 0.0,
            'arm_count': 0,
            'arm_errors': 0,
            'arm_times': {},
        }
        self.start_time = time.time()
        self._process = psutil.Process()
        self._epoch_start: Optional[float] = None

    def start_epoch(self):
        self._epoch_start = time.perf_counter()

    def end_epoch(self) -> Dict[str, float]:
        """Close the running epoch; returns its seconds and the process RSS in MB"""
        if self._epoch_start is None:
            raise RuntimeError("end_epoch() without start_epoch()")
        seconds = time.perf_counter() - self._epoch_start
        self._epoch_start = None
        self.metrics['epoch_count'] += 1
        self.metrics['total_epoch_time'] += seconds
        self.metrics['average_epoch_time'] = (
            self.metrics['total_epoch_time'] / self.metrics['epoch_count']
        )
        return {'seconds': seconds, 'rss_mb': self.rss_mb()}

    def record_arm(self, name: str, seconds: float, success: bool = True):
        """Record one harness arm"""
        self.metrics['arm_count'] += 1
        self.metrics['arm_times'][name] = seconds
        if not success:
            self.metrics['arm_errors'] += 1

    def rss_mb(self) -> float:
        return self._process.memory_info().rss / (1024 * 1024)

    def get_system_metrics(self) -> Dict[str, Any]:
        """Get system performance metrics"""
        return {
            'cpu_percent': psutil.cpu_percent(),
            'memory_percent': psutil.virtual_memory().percent,
            'rss_mb': self.rss_mb(),
            'uptime': time.time() - self.start_time
        }

    def get_metrics(self) -> Dict[str, Any]:
        """Get all performance metrics"""
        return {
            **self.metrics,
            'system': self.get_system_metrics(),
            'timestamp': datetime.now().isoformat()
        }


# Global performance monitor
performance_monitor = PerformanceMonitor()


def monitor_performance(name: Optional[str] = None):
    """Decorator timing a harness arm and recording it on the global monitor"""
    def decorate(func):
        label = name or func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            success = True
            try:
                return func(*args, **kwargs)
            except Exception:
                success = False
                raise
            finally:
                elapsed = time.perf_counter() - start_time
                performance_monitor.record_arm(label, elapsed, success)
                logger.debug(f"{label} finished in {elapsed:.2f}s (success={success})")

        return wrapper
    return decorate


def get_performance_metrics() -> Dict[str, Any]:
    """Get current performance metrics"""
    return performance_monitor.get_metrics()

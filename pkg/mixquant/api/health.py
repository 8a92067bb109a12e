"""
Host environment snapshot and worker-thread sizing
"""

import os
import platform
from datetime import datetime
from typing import Any, Dict

import numpy as np
import psutil
import structlog

logger = structlog.get_logger(__name__)


class HealthAPI:
    """Reports the machine a run executes on"""

    def __init__(self):
        self.start_time = datetime.now()

    def environment_status(self) -> Dict[str, Any]:
        """CPU, memory and library versions, logged at the start of every command"""
        try:
            memory = psutil.virtual_memory()
            process = psutil.Process(os.getpid())
            return {
                "system": {
                    "platform": platform.platform(),
                    "python": platform.python_version(),
                    "numpy": np.__version__,
                    "physical_cores": psutil.cpu_count(logical=False),
                    "logical_cores": psutil.cpu_count(logical=True),
                    "memory_total_mb": round(memory.total / 1024 / 1024, 1),
                    "memory_available_mb": round(memory.available / 1024 / 1024, 1),
                },
                "process": {
                    "rss_mb": round(process.memory_info().rss / 1024 / 1024, 1),
                    "uptime_seconds": round((datetime.now() - self.start_time).total_seconds(), 3),
                },
                "timestamp": datetime.now().isoformat(),
                "status": 0,
            }
        except Exception as e:
            logger.error("Failed to read environment", error=str(e))
            return {"error": str(e), "status": 2}

    @staticmethod
    def resolve_threads(requested: int) -> int:
        """0 means one worker per physical core"""
        if requested > 0:
            return requested
        return psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1

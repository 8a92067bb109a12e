"""
Command handlers for mixquant
"""

from .commands import CommandsAPI, format_table
from .health import HealthAPI

__all__ = ['CommandsAPI', 'HealthAPI', 'format_table']

"""
Config parser for the sectioned `key = value` run configuration format
"""

import re
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, List, Optional, Tuple, get_type_hints

import structlog

from ..models.config import RunConfig, coerce_value
from .errors import ConfigError, ParseError

logger = structlog.get_logger(__name__)


class LineKind(Enum):
    SECTION = "section"
    ASSIGNMENT = "assignment"
    BLANK = "blank"


@dataclass
class ParsedLine:
    """One line of config text"""
    kind: LineKind
    line_number: int
    section: Optional[str] = None
    key: Optional[str] = None
    value: Optional[str] = None


class ConfigParser:
    """Parser for run configuration text

    Grammar: `[section]` headers, `key = value` assignments, `#` comments.
    A dotted key (`quant.act_bits = 8`) names its section explicitly and may
    appear anywhere.
    """

    def __init__(self):
        self.line_number = 0
        self.section: Optional[str] = None
        self._compile_patterns()

    def _compile_patterns(self):
        self.patterns = {
            LineKind.SECTION: re.compile(r'^\[\s*([A-Za-z_][A-Za-z0-9_]*)\s*\]$'),
            LineKind.ASSIGNMENT: re.compile(r'^([A-Za-z_][A-Za-z0-9_.]*)\s*=\s*(.*)$'),
        }
        self.comment = re.compile(r'(^|\s)#.*$')

    def parse_line(self, line: str) -> ParsedLine:
        self.line_number += 1
        text = self.comment.sub('', line).strip()
        if not text:
            return ParsedLine(LineKind.BLANK, self.line_number)

        match = self.patterns[LineKind.SECTION].match(text)
        if match:
            self.section = match.group(1)
            if self.section not in RunConfig.SECTIONS:
                raise ParseError(f"unknown section '{self.section}'", self.line_number)
            return ParsedLine(LineKind.SECTION, self.line_number, section=self.section)

        match = self.patterns[LineKind.ASSIGNMENT].match(text)
        if not match:
            raise ParseError(f"malformed line '{text}'", self.line_number)
        section, key = self._split_key(match.group(1))
        return ParsedLine(LineKind.ASSIGNMENT, self.line_number, section=section,
                          key=key, value=match.group(2).strip())

    def _split_key(self, raw_key: str) -> Tuple[str, str]:
        if '.' in raw_key:
            section, _, key = raw_key.partition('.')
            if section not in RunConfig.SECTIONS or not key or '.' in key:
                raise ParseError("unknown key", self.line_number, raw_key)
            return section, key
        if self.section is None:
            raise ParseError("assignment before any [section]", self.line_number, raw_key)
        return self.section, raw_key

    def parse(self, text: str) -> RunConfig:
        self.reset()
        config = RunConfig()
        for line in text.splitlines():
            parsed = self.parse_line(line)
            if parsed.kind is LineKind.ASSIGNMENT:
                _assign(config, parsed.section, parsed.key, parsed.value, parsed.line_number)
        return config

    def reset(self):
        self.line_number = 0
        self.section = None


def _assign(config: RunConfig, section_name: str, key: str, raw: Any, line_number: int = 0):
    section = config.section(section_name)
    hints = get_type_hints(type(section))
    if key not in {f.name for f in fields(section)}:
        if line_number:
            raise ParseError("unknown key", line_number, f"{section_name}.{key}")
        raise ConfigError("unknown key", f"{section_name}.{key}")
    if isinstance(raw, str) and len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        value = coerce_value(raw, hints[key], f"{section_name}.{key}")
    except ConfigError as e:
        if line_number:
            raise ParseError(str(e), line_number, f"{section_name}.{key}") from e
        raise
    setattr(section, key, value)


def parse_config(text: str) -> RunConfig:
    """Parse config text into a RunConfig (not yet validated)"""
    return ConfigParser().parse(text)


def load_config(path: str) -> RunConfig:
    with open(path, 'r', encoding='utf-8') as f:
        config = parse_config(f.read())
    logger.debug("Config loaded", path=path)
    return config


def apply_override(config: RunConfig, assignment: str) -> RunConfig:
    """Apply one `section.key=value` override in place"""
    key, sep, value = assignment.partition('=')
    key = key.strip()
    if not sep or '.' not in key:
        raise ConfigError(f"override '{assignment}' must look like section.key=value")
    section, _, name = key.partition('.')
    if section not in RunConfig.SECTIONS:
        raise ConfigError("unknown section", key)
    _assign(config, section, name, value.strip())
    return config


def apply_overrides(config: RunConfig, assignments: List[str]) -> RunConfig:
    for assignment in assignments or []:
        apply_override(config, assignment)
    return config

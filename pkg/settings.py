"""Settings files: `key = value` lines with `#` comments."""

# == IMPORTS ===================================================================================== #

from os import path
from typing import *

# == ERRORS ====================================================================================== #

class ConfigError(ValueError):
    """Raised for invalid configuration values, keys, or settings-file lines."""

# == READING & WRITING =========================================================================== #

def parse_settings(text: str, source: str = "<settings>") -> Dict[str, str]:
    """Parses settings text into an ordered mapping of raw string values.

    Blank lines and everything after a `#` are ignored. Every malformed line is reported with
    its line number in a single `ConfigError`.

    >>> parse_settings("learning_rate = 0.00005  # default")
    {'learning_rate': '0.00005'}
    """

    settings: Dict[str, str] = {}
    errors = []

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if line == "":
            continue

        if '=' not in line:
            errors.append(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'.")
            continue

        key, value = (part.strip() for part in line.split('=', 1))
        if key == "":
            errors.append(f"{source}:{number}: missing key before '='.")
        elif key in settings:
            errors.append(f"{source}:{number}: duplicate key '{key}'.")
        else:
            settings[key] = value

    if len(errors) > 0:
        raise ConfigError('\n'.join(errors))

    return settings

def read_settings(settings_file: str) -> Dict[str, str]:
    """Reads a settings file; see `parse_settings`.

    Parameters
    ==========
    settings_file: `str`
        Path of the file to read.

    Returns
    =======
    `Dict[str, str]`
        Keys in file order mapped to their raw values.
    """

    if not path.exists(settings_file):
        raise ConfigError(f"Settings file '{settings_file}' does not exist.")

    with open(settings_file, 'r', encoding="utf-8") as f:
        return parse_settings(f.read(), settings_file)

def format_settings(settings: Mapping[str, Any]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in settings.items())

def write_settings(settings_file: str, settings: Mapping[str, Any]) -> None:
    with open(settings_file, 'w', encoding="utf-8") as f:
        f.write(format_settings(settings))

# == VALUE PARSERS =============================================================================== #

def parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False

    raise ValueError(f"'{value}' is not a boolean.")

def parse_int(value: str) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise ValueError(f"'{value}' is not an integer.")

def parse_float(value: str) -> float:
    try:
        return float(value.strip())
    except ValueError:
        raise ValueError(f"'{value}' is not a number.")

def parse_int_list(value: str) -> Tuple[int, ...]:
    """Comma-separated integers; an empty value is the empty list."""

    items = [item.strip() for item in value.split(',')]
    if items == [""]:
        return ()

    return tuple(parse_int(item) for item in items)

def parse_size(value: str) -> Tuple[int, int]:
    """`WxH` (or `W,H`) into `(W, H)`."""

    parts = value.lower().replace(',', 'x').split('x')
    if len(parts) != 2:
        raise ValueError(f"'{value}' is not a size of the form WxH.")

    return parse_int(parts[0]), parse_int(parts[1])

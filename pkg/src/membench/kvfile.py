"""Line-oriented ``key = value`` files.

One assignment per line, ``#`` starts a comment, keys are dotted paths
(``cache.0.capacity_bytes``).  Machine specs and run configs use this
format; virtual schedules share it under ``vplat.*`` keys.
"""

from fractions import Fraction

from .errors import SpecParseError


class KVFile:
    """Parsed key-value pairs that remember the line each key came from."""

    def __init__(self, entries):
        # key -> (value, lineno)
        self.entries = dict(entries)
        self._used = set()

    def __contains__(self, key):
        return key in self.entries

    def keys(self):
        return self.entries.keys()

    def line_of(self, key):
        return self.entries[key][1]

    def raw(self, key, default=None):
        if key not in self.entries:
            return default
        self._used.add(key)
        return self.entries[key][0]

    def _convert(self, key, default, conv, kind):
        value = self.raw(key)
        if value is None or value == "":
            return default
        try:
            return conv(value)
        except (ValueError, ZeroDivisionError):
            raise SpecParseError(f"expected {kind}, got {value!r}",
                                 line=self.line_of(key), field=key) from None

    def str(self, key, default=None):
        return self._convert(key, default, str, "string")

    def int(self, key, default=None):
        return self._convert(key, default, parse_int, "integer")

    def fraction(self, key, default=None):
        return self._convert(key, default, Fraction, "number")

    def float(self, key, default=None):
        return self._convert(key, default, float, "number")

    def bool(self, key, default=None):
        return self._convert(key, default, parse_bool, "boolean")

    def int_list(self, key, default=None):
        return self._convert(
            key, default, lambda v: [parse_int(p) for p in v.split(",") if p.strip()],
            "comma-separated integers")

    def indices(self, prefix):
        """Sorted integer indices ``n`` appearing as ``<prefix>.<n>.*``."""
        found = set()
        for key in self.entries:
            if not key.startswith(prefix + "."):
                continue
            head = key[len(prefix) + 1:].split(".", 1)[0]
            try:
                found.add(int(head))
            except ValueError:
                raise SpecParseError("index must be an integer",
                                     line=self.line_of(key), field=key) from None
        return sorted(found)

    def unused(self, prefix=""):
        return sorted(k for k in self.entries
                      if k.startswith(prefix) and k not in self._used)


def parse_int(text):
    text = text.strip().replace("_", "")
    return int(text, 0)


def parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def parse(text):
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise SpecParseError("expected 'key = value'", line=lineno)
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key or any(ch.isspace() for ch in key):
            raise SpecParseError("malformed key", line=lineno, field=key or None)
        if key in entries:
            raise SpecParseError("duplicate key", line=lineno, field=key)
        entries[key] = (value.strip(), lineno)
    return KVFile(entries)


def read(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def format_number(value):
    """Render ints/Fractions losslessly: finite decimals as decimals, else ``n/d``."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    digits = max(twos, fives)
    scaled = value * 10 ** digits
    sign = "-" if scaled < 0 else ""
    text = str(abs(scaled.numerator)).rjust(digits + 1, "0")
    return f"{sign}{text[:-digits]}.{text[-digits:]}"


def dump(pairs):
    lines = []
    for key, value in pairs:
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(format_number(v) if not isinstance(v, str) else v
                             for v in value)
        elif not isinstance(value, str):
            value = format_number(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

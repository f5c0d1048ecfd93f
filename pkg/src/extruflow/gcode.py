"""G-code reading and writing.

Only the subset needed to carry a sliced toolpath through optimization is
understood: linear moves (G0/G1), positioning modes (G90/G91), extrusion
modes (M82/M83), position resets (G92) and homing (G28). Everything else is
kept verbatim as passthrough text so the rewritten file stays printable.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from . import __version__

DECIMALS = 5

_HEAD_RE = re.compile(r"^([GMTgmt])\s*(\d+(?:\.\d*)?)")
_INTERPRETED = {"G0", "G1", "G2", "G3", "G20", "G21", "G28", "G90", "G91", "G92", "M82", "M83"}
_WORD_RE = re.compile(r"([A-Za-z])\s*([^A-Za-z\s]*)")
_PAREN_RE = re.compile(r"\([^)]*\)")
_NUMBER_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)$")
G92_E_RE = re.compile(r"^\s*G92\b[^;]*\bE\s*([+-]?[\d.]+)", re.IGNORECASE)

OPTIMIZED_MARKER = "; extruflow optimized"


class GCodeError(ValueError):
    """Malformed G-code; carries the offending 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        where = f"line {line_number}: " if line_number is not None else ""
        super().__init__(where + message)


class UnsupportedFeatureError(GCodeError):
    pass


@dataclass(frozen=True)
class GMove:
    """One linear move, extrusion already normalized to a relative increment."""

    start: tuple[float, float, float]
    target: tuple[float, float, float]
    extrude: float = 0.0
    feedrate: float | None = None
    explicit_e: bool = False
    line_number: int | None = None

    def __post_init__(self):
        if self.feedrate is not None and not self.feedrate > 0:
            raise GCodeError(f"feedrate must be positive, got {self.feedrate}", self.line_number)

    @property
    def length(self) -> float:
        return math.dist(self.start, self.target)

    @property
    def kind(self) -> str:
        return "print" if self.extrude > 0 and self.length > 0 else "travel"

    @property
    def in_place(self) -> bool:
        """True for retract/prime moves: extrusion without displacement."""
        return self.length == 0 and self.extrude != 0

    @property
    def ratio(self) -> float:
        """Extrusion ratio E / distance (0 for in-place moves)."""
        return self.extrude / self.length if self.length > 0 else 0.0

    def same_motion(self, other: "GMove", tol: float = 0.0) -> bool:
        return (
            all(abs(a - b) <= tol for a, b in zip(self.target, other.target))
            and abs(self.extrude - other.extrude) <= tol
            and self.feedrate == other.feedrate
            and self.kind == other.kind
        )


@dataclass(frozen=True)
class Passthrough:
    """A source line the optimizer does not interpret, re-emitted verbatim."""

    text: str
    line_number: int | None = None


Record = Union[GMove, Passthrough]


@dataclass
class ToolPath:
    records: list[Record] = field(default_factory=list)
    extrusion_mode: str = "relative"
    units: str = "mm"

    def __post_init__(self):
        if self.extrusion_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown extrusion mode {self.extrusion_mode!r}")
        if self.units != "mm":
            raise UnsupportedFeatureError("only millimetre units are supported")
        self.records = _collapse_duplicates(self.records)

    @property
    def moves(self) -> list[GMove]:
        return [r for r in self.records if isinstance(r, GMove)]

    @property
    def passthrough(self) -> list[Passthrough]:
        return [r for r in self.records if isinstance(r, Passthrough)]

    def total_extrusion(self) -> float:
        return math.fsum(m.extrude for m in self.moves)

    def total_length(self, kind: str | None = None) -> float:
        return math.fsum(m.length for m in self.moves if kind is None or m.kind == kind)

    def is_optimized(self) -> bool:
        return any(p.text.startswith(OPTIMIZED_MARKER) for p in self.passthrough)


def _collapse_duplicates(records: Iterable[Record]) -> list[Record]:
    out = []
    for r in records:
        if isinstance(r, GMove) and r.length == 0 and r.extrude == 0:
            continue
        out.append(r)
    return out


def _strip_comments(line: str) -> str:
    code = line.split(";", 1)[0]
    return _PAREN_RE.sub(" ", code).strip()


def _parse_words(code: str, line_number: int) -> list[tuple[str, float | int]]:
    words = []
    for letter, value in _WORD_RE.findall(code):
        letter = letter.upper()
        if not _NUMBER_RE.match(value):
            raise GCodeError(f"malformed value {value!r} for word {letter}", line_number)
        words.append((letter, float(value)))
    leftover = _WORD_RE.sub("", code).strip()
    if leftover:
        raise GCodeError(f"unexpected text {leftover!r}", line_number)
    return words


def parse_gcode(text: str) -> ToolPath:
    """Parse G-code text into a ToolPath with relative extrusion per move."""
    pos = [0.0, 0.0, 0.0]
    e_pos = 0.0
    abs_xyz = True
    abs_e = True
    saw_e_mode = None
    feed: float | None = None
    records: list[Record] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        code = _strip_comments(line)
        if not code:
            records.append(Passthrough(line, lineno))
            continue
        head = _HEAD_RE.match(code)
        if head is None:
            raise GCodeError(f"line does not start with a command word: {code!r}", lineno)
        cmd = head.group(1).upper() + str(int(float(head.group(2))))
        if cmd not in _INTERPRETED:
            records.append(Passthrough(line, lineno))
            continue
        args = dict(_parse_words(code[head.end():], lineno))

        if cmd in ("G0", "G1"):
            if "F" in args:
                if not args["F"] > 0:
                    raise GCodeError("feedrate must be positive", lineno)
                feed = args["F"]
            target = list(pos)
            for i, axis in enumerate("XYZ"):
                if axis in args:
                    target[i] = args[axis] if abs_xyz else pos[i] + args[axis]
            de = 0.0
            has_e = "E" in args
            if has_e:
                if abs_e:
                    de = args["E"] - e_pos
                    e_pos = args["E"]
                else:
                    de = args["E"]
            if not all(math.isfinite(v) for v in target):
                raise GCodeError("non-finite coordinate", lineno)
            move = GMove(tuple(pos), tuple(target), de, feed, has_e, lineno)
            if move.length == 0 and de == 0:
                # feedrate-only or no-op line: keep the text, F is tracked above
                records.append(Passthrough(line, lineno))
            else:
                records.append(move)
            pos = target
        elif cmd in ("G2", "G3"):
            raise UnsupportedFeatureError("arc moves (G2/G3) are not supported; re-slice with arcs disabled", lineno)
        elif cmd == "G20":
            raise UnsupportedFeatureError("inch units (G20) are not supported", lineno)
        elif cmd == "G21":
            pass
        elif cmd == "G90":
            abs_xyz = True
            if saw_e_mode is None:
                abs_e = True
        elif cmd == "G91":
            abs_xyz = False
            if saw_e_mode is None:
                abs_e = False
        elif cmd == "M82":
            abs_e = True
            saw_e_mode = "absolute"
        elif cmd == "M83":
            abs_e = False
            saw_e_mode = "relative"
        elif cmd == "G92":
            for i, axis in enumerate("XYZ"):
                if axis in args:
                    pos[i] = args[axis]
            if "E" in args:
                e_pos = args["E"]
            if not args:
                pos = [0.0, 0.0, 0.0]
                e_pos = 0.0
            records.append(Passthrough(line, lineno))
        elif cmd == "G28":
            axes = [a for a in "XYZ" if a in args] or ["X", "Y", "Z"]
            for a in axes:
                pos["XYZ".index(a)] = 0.0
            records.append(Passthrough(line, lineno))

    mode = "absolute" if abs_e else "relative"
    return ToolPath(records, extrusion_mode=mode)


def fmt(value: float) -> str:
    s = f"{value:.{DECIMALS}f}"
    return "0.00000" if s == "-0.00000" else s


def _to_units(value: float, decimals: int = DECIMALS) -> int:
    return int(round(value * 10**decimals))


def _units_str(units: int, decimals: int = DECIMALS) -> str:
    sign = "-" if units < 0 else ""
    units = abs(units)
    q = 10**decimals
    return f"{sign}{units // q}.{units % q:0{decimals}d}"


def format_toolpath(path: ToolPath, mode: str = "relative", e_decimals: int = DECIMALS) -> str:
    """Write a ToolPath back to G-code text (LF line endings).

    Rounding of extrusion is carried forward so that the printed increments
    always sum to the rounded running total: no drift, however many moves.
    """
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown extrusion mode {mode!r}")
    if not 1 <= e_decimals <= 9:
        raise ValueError("e_decimals must lie in [1, 9]")
    lines = ["G21", "G90", "M83" if mode == "relative" else "M82"]
    exact_total = 0.0
    emitted_units = 0  # running total as printed, in units of 10^-e_decimals mm
    abs_units = 0
    last_feed = None
    for rec in path.records:
        if isinstance(rec, Passthrough):
            lines.append(rec.text)
            m = G92_E_RE.match(rec.text)
            if m:
                abs_units = _to_units(float(m.group(1)), e_decimals)
            continue
        words = ["G1"]
        if rec.length > 0:
            words += [f"X{fmt(rec.target[0])}", f"Y{fmt(rec.target[1])}", f"Z{fmt(rec.target[2])}"]
        if rec.explicit_e or rec.extrude != 0:
            exact_total += rec.extrude
            target_units = _to_units(exact_total, e_decimals)
            inc = target_units - emitted_units
            emitted_units = target_units
            if mode == "relative":
                words.append(f"E{_units_str(inc, e_decimals)}")
            else:
                abs_units += inc
                words.append(f"E{_units_str(abs_units, e_decimals)}")
        if rec.feedrate is not None and rec.feedrate != last_feed:
            words.append(f"F{fmt(rec.feedrate)}")
            last_feed = rec.feedrate
        lines.append(" ".join(words))
    return "\n".join(lines) + "\n"


def quantize_extrusion(amounts: Sequence[float], decimals: int = DECIMALS) -> np.ndarray:
    """Round per-segment extrusion so every value is representable at `decimals`.

    The running sum is rounded rather than each value, so the quantized total
    never differs from the exact total by more than half a unit.
    """
    q = 10**decimals
    cum = np.rint(np.cumsum(np.asarray(amounts, dtype=float)) * q).astype(np.int64)
    return np.diff(cum, prepend=0) / q


def header_lines(params: dict[str, object] | None = None) -> list[str]:
    lines = [f"{OPTIMIZED_MARKER} v{__version__}"]
    for key, value in sorted((params or {}).items()):
        if isinstance(value, float):
            value = fmt(value)
        lines.append(f"; {key} = {value}")
    return lines


def emit_gcode(points, controls, feedrate: float, mode: str = "relative",
               params: dict[str, object] | None = None) -> str:
    """Emit one G1 line per segment of a discretized polyline.

    `points` is an (N+1, 3) array or a DiscretizedPath; `controls` holds N
    extrusion ratios (a ControlSequence or plain sequence). Segment k extrudes
    ratio_k * |P_{k+1} - P_k|.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=float)
    xi = np.asarray(getattr(controls, "xi", controls), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (N+1, 3) array")
    if len(xi) != len(pts) - 1:
        raise ValueError(f"{len(xi)} controls for {len(pts) - 1} segments")
    if not np.all(np.isfinite(xi)):
        raise ValueError("controls must be finite")
    if not feedrate > 0:
        raise ValueError("feedrate must be positive")
    lengths = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    records: list[Record] = [Passthrough(t) for t in header_lines(params)]
    start = tuple(pts[0])
    if any(start):
        records.append(GMove((0.0, 0.0, 0.0), start, 0.0, feedrate))
    for k in range(len(xi)):
        records.append(GMove(tuple(pts[k]), tuple(pts[k + 1]), float(xi[k] * lengths[k]), feedrate, True))
    return format_toolpath(ToolPath(records), mode)

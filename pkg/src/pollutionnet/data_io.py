"""File formats: grid stacks, station CSVs, model checkpoints and figure exports.

Grid stack (``GSTK1``)::

    GSTK1\\n
    lat_min lat_max lon_min lon_max resolution rows cols n_times\\n
    day_0 day_1 ... day_{n-1}\\n
    <n_times * rows * cols little-endian float32, time-major, row-major>

NaN marks invalid cells.  Checkpoints (``VCKPT1``) use the same layout idea:
a magic line, a JSON config line, a JSON parameter table line, then the
float64 little-endian parameter payload in table order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .grid import Field, FieldStack, GridSpec, GridError, StationRecord
from .vit import ViTConfig, ViTRegressor, Scaling, ConfigError

STACK_MAGIC = b"GSTK1"
CKPT_MAGIC = b"VCKPT1"
STATION_HEADER = ["station_id", "lat", "lon", "day", "value"]
_MAX_CELLS = 1 << 31


class FormatError(ValueError):
    """Malformed input file; ``offset`` is a byte offset or line number."""

    def __init__(self, path, message, offset=None, unit="byte"):
        self.path = str(path)
        self.offset = offset
        where = f" at {unit} {offset}" if offset is not None else ""
        super().__init__(f"{path}{where}: {message}")


# --------------------------------------------------------------------------
# grid stacks


def _fmt(x: float) -> str:
    return repr(float(x))


def stack_to_bytes(stack: FieldStack) -> bytes:
    s = stack.spec
    head = [
        STACK_MAGIC.decode(),
        " ".join([_fmt(s.lat_min), _fmt(s.lat_max), _fmt(s.lon_min), _fmt(s.lon_max),
                  _fmt(s.resolution), str(s.rows), str(s.cols), str(len(stack))]),
        " ".join(str(int(t)) for t in stack.times),
    ]
    payload = stack.values.astype("<f4").tobytes()
    return ("\n".join(head) + "\n").encode("ascii") + payload


def write_stack(stack: FieldStack, path) -> None:
    Path(path).write_bytes(stack_to_bytes(stack))


def _read_line(buf: bytes, pos: int, path, what: str):
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError(path, f"unterminated {what} line", pos)
    try:
        return buf[pos:end].decode("ascii"), end + 1
    except UnicodeDecodeError:
        raise FormatError(path, f"non-ASCII bytes in {what} line", pos) from None


def stack_from_bytes(buf: bytes, path="<bytes>") -> FieldStack:
    if not buf.startswith(STACK_MAGIC + b"\n"):
        raise FormatError(path, f"bad magic {buf[:len(STACK_MAGIC)]!r}, expected {STACK_MAGIC!r}", 0)
    pos = len(STACK_MAGIC) + 1
    dims_pos = pos
    line, pos = _read_line(buf, pos, path, "dimension")
    parts = line.split()
    if len(parts) != 8:
        raise FormatError(path, f"dimension line needs 8 fields, found {len(parts)}", dims_pos)
    try:
        bounds = [float(v) for v in parts[:5]]
        rows, cols, n_times = (int(v) for v in parts[5:])
    except ValueError as exc:
        raise FormatError(path, f"unparsable dimension line: {exc}", dims_pos) from None
    if rows < 1 or cols < 1 or n_times < 0:
        raise FormatError(path, f"invalid dimensions rows={rows} cols={cols} n_times={n_times}", dims_pos)
    if rows * cols * max(n_times, 1) > _MAX_CELLS:
        raise FormatError(path, f"dimensions {rows}x{cols}x{n_times} exceed the supported size", dims_pos)
    try:
        spec = GridSpec(*bounds, rows, cols)
    except GridError as exc:
        raise FormatError(path, f"invalid grid: {exc}", dims_pos) from None
    days_pos = pos
    line, pos = _read_line(buf, pos, path, "day index")
    try:
        times = [int(v) for v in line.split()]
    except ValueError as exc:
        raise FormatError(path, f"unparsable day index: {exc}", days_pos) from None
    if len(times) != n_times:
        raise FormatError(path, f"header declares {n_times} days but lists {len(times)}", days_pos)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise FormatError(path, "day indices must be strictly increasing", days_pos)
    expected = n_times * rows * cols * 4
    actual = len(buf) - pos
    if actual != expected:
        kind = "truncated payload" if actual < expected else "trailing bytes after payload"
        raise FormatError(path, f"{kind}: expected {expected} bytes, found {actual}", pos)
    values = np.frombuffer(buf, dtype="<f4", count=n_times * rows * cols, offset=pos)
    values = values.astype(np.float64).reshape(n_times, rows, cols)
    bad = np.isinf(values)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(path, "infinite value in payload", pos + 4 * first)
    return FieldStack(spec, times, values)


def read_stack(path) -> FieldStack:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc.strerror}") from None
    return stack_from_bytes(buf, path)


def write_field(field: Field, path, day: int = 0) -> None:
    write_stack(FieldStack(field.spec, [day], field.values[None]), path)


def read_field(path) -> Field:
    stack = read_stack(path)
    if len(stack) != 1:
        raise FormatError(path, f"expected a single-field stack, found {len(stack)} fields")
    return stack[0]


# --------------------------------------------------------------------------
# station CSV


def write_stations(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_HEADER)
        for r in records:
            w.writerow([r.station_id, _fmt(r.lat), _fmt(r.lon), int(r.day), _fmt(r.value)])


def parse_stations(text: str, path="<text>", spec: GridSpec | None = None) -> list[StationRecord]:
    """Parse station rows; with ``spec`` given, points outside the grid box are rejected too."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(path, "empty file, expected header " + ",".join(STATION_HEADER), 1, "line") from None
    if [h.strip() for h in header] != STATION_HEADER:
        raise FormatError(path, f"bad header {header!r}, expected {','.join(STATION_HEADER)}", 1, "line")
    records = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise FormatError(path, f"expected 5 columns, found {len(row)}", line, "line")
        sid = row[0].strip()
        if not sid:
            raise FormatError(path, "empty station_id", line, "line")
        try:
            lat, lon, value = float(row[1]), float(row[2]), float(row[4])
        except ValueError as exc:
            raise FormatError(path, f"non-numeric field: {exc}", line, "line") from None
        try:
            day = int(row[3])
        except ValueError:
            raise FormatError(path, f"day must be an integer, got {row[3]!r}", line, "line") from None
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise FormatError(path, f"non-finite coordinates ({row[1]}, {row[2]})", line, "line")
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise FormatError(path, f"coordinates ({lat}, {lon}) out of range", line, "line")
        if not math.isfinite(value) or value < 0:
            raise FormatError(path, f"value must be finite and non-negative, got {row[4]!r}", line, "line")
        if spec is not None and not spec.contains(lat, lon):
            raise FormatError(path, f"station {sid} at ({lat}, {lon}) is outside grid box "
                                    f"[{spec.lat_min}, {spec.lat_max}] x [{spec.lon_min}, {spec.lon_max}]",
                              line, "line")
        records.append(StationRecord(sid, lat, lon, day, value))
    return records


def read_stations(path, spec: GridSpec | None = None) -> list[StationRecord]:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc.strerror}") from None
    except UnicodeDecodeError as exc:
        raise FormatError(path, "file is not valid UTF-8", exc.start) from None
    return parse_stations(text, path, spec)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ViTRegressor, path, extra: dict | None = None) -> None:
    params = model.parameters()
    config = {"vit": model.config.to_dict(), "scaling": vars(model.scaling).copy(),
              "extra": extra or {}}
    table = [[p.name, list(p.shape)] for p in params]
    head = CKPT_MAGIC + b"\n" + json.dumps(config, sort_keys=True).encode() + b"\n" \
        + json.dumps(table).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(head)
        for p in params:
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path, expect: ViTConfig | None = None) -> tuple[ViTRegressor, dict]:
    """Load a model; returns ``(model, extra)``.

    ``expect`` optionally pins the configuration; any mismatch is an error.
    """
    path = Path(path)
    buf = path.read_bytes()
    if not buf.startswith(CKPT_MAGIC + b"\n"):
        raise FormatError(path, "bad checkpoint magic", 0)
    pos = len(CKPT_MAGIC) + 1
    try:
        line, pos2 = _read_line(buf, pos, path, "config")
        config = json.loads(line)
        line, pos3 = _read_line(buf, pos2, path, "parameter table")
        table = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"bad JSON header: {exc}", pos) from None
    try:
        cfg = ViTConfig(**config["vit"])
        scaling = Scaling(**config["scaling"])
    except (KeyError, TypeError) as exc:
        raise FormatError(path, f"incomplete checkpoint config: {exc}", pos) from None
    if expect is not None and expect != cfg:
        diffs = {k: (v, getattr(expect, k)) for k, v in cfg.to_dict().items() if getattr(expect, k) != v}
        raise ConfigError(f"checkpoint config differs from expected: {diffs}")
    model = ViTRegressor(cfg, scaling=scaling)
    named = model.named_parameters()
    if [t[0] for t in table] != list(named):
        missing = set(named) ^ {t[0] for t in table}
        raise ConfigError(f"checkpoint parameter names do not match the model: {sorted(missing)[:5]}")
    offset = pos3
    for name, shape in table:
        p = named[name]
        if tuple(shape) != p.shape:
            raise ConfigError(f"parameter {name!r}: checkpoint shape {tuple(shape)} != model shape {p.shape}")
        nbytes = 8 * p.size
        if offset + nbytes > len(buf):
            raise FormatError(path, f"truncated data for parameter {name!r}", offset)
        p.data[...] = np.frombuffer(buf, dtype="<f8", count=p.size, offset=offset).reshape(p.shape)
        offset += nbytes
    if offset != len(buf):
        raise FormatError(path, f"{len(buf) - offset} trailing bytes", offset)
    return model, config.get("extra", {})


# --------------------------------------------------------------------------
# figure data


def heatmap_pixels(field: Field) -> np.ndarray:
    """8-bit grayscale scaled to the valid range; invalid cells are 0, row 0 at the bottom."""
    if field.n_valid == 0:
        raise ValueError("cannot render a field without valid cells")
    v = field.values[field.mask]
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = np.rint((np.where(field.mask, field.values, lo) - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(field.spec.shape, 128.0)
    pix = np.where(field.mask, scaled, 0).astype(np.uint8)
    return pix[::-1]


def export_heatmap(field: Field, path) -> tuple[Path, Path]:
    """Write ``<path>.pgm`` (binary graymap) and ``<path>.csv`` (row,col,value of valid cells)."""
    path = Path(path)
    pix = heatmap_pixels(field)
    img = path.with_suffix(".pgm")
    rows, cols = pix.shape
    img.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes())
    table = path.with_suffix(".csv")
    r, c = np.nonzero(field.mask)
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for i, j in zip(r, c):
            w.writerow([int(i), int(j), _fmt(field.values[i, j])])
    return img, table


def export_scatter(truth, pred, path) -> Path:
    """Write ``truth,pred`` pairs for every cell valid in both arrays."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ok = np.isfinite(truth) & np.isfinite(pred)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth", "pred"])
        for t, p in zip(truth[ok], pred[ok]):
            w.writerow([_fmt(t), _fmt(p)])
    return path


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(path, "not a binary PGM", 0)
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


# --------------------------------------------------------------------------
# key = value text


def parse_kv(text: str, path="<text>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(path, f"expected 'key = value', got {raw!r}", n, "line")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise FormatError(path, "empty key", n, "line")
        out[k] = v
    return out


def format_kv(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())

"""Experiment metadata: record type, CSV/JSONL ingestion, filtering and accuracy scales."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence, Union

REQUIRED_COLUMNS = (
    "experiment_id",
    "arch_family",
    "upstream_task",
    "downstream_task",
    "shots",
    "upstream_accuracy",
    "downstream_accuracy",
)
HP_PREFIX = "hp_"


class RecordError(ValueError):
    """Base class for ingestion failures."""


class RecordParseError(RecordError):
    def __init__(self, row: int, field_name: str, message: str):
        self.row = row
        self.field = field_name
        super().__init__(f"row {row}: field {field_name!r}: {message}")


class RecordRangeError(RecordParseError):
    pass


class DuplicateIdError(RecordError):
    def __init__(self, row: int, experiment_id: str):
        self.row = row
        self.experiment_id = experiment_id
        super().__init__(f"row {row}: duplicate experiment_id {experiment_id!r}")


class MissingColumnError(RecordError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing required column {column!r}")


class ScaleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentRecord:
    experiment_id: str
    arch_family: str
    upstream_task: str
    downstream_task: str
    shots: int
    upstream_accuracy: float
    downstream_accuracy: float
    hyperparams: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if not self.experiment_id:
            raise ValueError("experiment_id must be nonempty")
        if self.shots < 0:
            raise ValueError(f"shots must be nonnegative, got {self.shots}")
        for name in ("upstream_accuracy", "downstream_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class RecordSelector:
    """Conjunction of optional field matches; an empty selector matches everything."""

    upstream_task: Optional[str] = None
    downstream_task: Optional[str] = None
    shots: Optional[int] = None
    arch_family: Optional[str] = None
    upstream_accuracy_range: Optional[tuple[float, float]] = None

    def matches(self, rec: ExperimentRecord) -> bool:
        if self.upstream_task is not None and rec.upstream_task != self.upstream_task:
            return False
        if self.downstream_task is not None and rec.downstream_task != self.downstream_task:
            return False
        if self.shots is not None and rec.shots != self.shots:
            return False
        if self.arch_family is not None and rec.arch_family != self.arch_family:
            return False
        if self.upstream_accuracy_range is not None:
            lo, hi = self.upstream_accuracy_range
            if not lo <= rec.upstream_accuracy <= hi:
                return False
        return True


def filter_records(records: Iterable[ExperimentRecord], selector: RecordSelector) -> list[ExperimentRecord]:
    return [r for r in records if selector.matches(r)]


# --- ingestion -------------------------------------------------------------

def _text_stream(data: Union[bytes, str, IO]) -> IO[str]:
    if isinstance(data, bytes):
        return io.StringIO(data.decode("utf-8"))
    if isinstance(data, str):
        return io.StringIO(data)
    if isinstance(data, io.TextIOBase):
        return data
    # binary file-like
    return io.TextIOWrapper(data, encoding="utf-8")


def _parse_accuracy(raw, row: int, name: str) -> float:
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise RecordParseError(row, name, f"not a number: {raw!r}") from None
    if math.isnan(v):
        raise RecordParseError(row, name, "NaN accuracy")
    if not 0.0 <= v <= 1.0:
        raise RecordRangeError(row, name, f"accuracy {v} outside [0, 1]")
    return v


def _parse_shots(raw, row: int) -> int:
    if isinstance(raw, bool):
        raise RecordParseError(row, "shots", f"not an integer: {raw!r}")
    if isinstance(raw, int):
        v = raw
    else:
        try:
            v = int(str(raw).strip())
        except ValueError:
            raise RecordParseError(row, "shots", f"not an integer: {raw!r}") from None
    if v < 0:
        raise RecordParseError(row, "shots", f"negative shot count {v}")
    return v


def _parse_string(raw, row: int, name: str, *, nonempty: bool = False) -> str:
    if raw is None:
        raise RecordParseError(row, name, "missing value")
    s = str(raw)
    if nonempty and not s:
        raise RecordParseError(row, name, "empty value")
    return s


def _build(row_no: int, values: dict, hyperparams: dict) -> ExperimentRecord:
    return ExperimentRecord(
        experiment_id=_parse_string(values.get("experiment_id"), row_no, "experiment_id", nonempty=True),
        arch_family=_parse_string(values.get("arch_family"), row_no, "arch_family"),
        upstream_task=_parse_string(values.get("upstream_task"), row_no, "upstream_task"),
        downstream_task=_parse_string(values.get("downstream_task"), row_no, "downstream_task"),
        shots=_parse_shots(values.get("shots"), row_no),
        upstream_accuracy=_parse_accuracy(values.get("upstream_accuracy"), row_no, "upstream_accuracy"),
        downstream_accuracy=_parse_accuracy(values.get("downstream_accuracy"), row_no, "downstream_accuracy"),
        hyperparams=hyperparams,
    )


def _parse_csv(stream: IO[str]) -> list[tuple[int, ExperimentRecord]]:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumnError(REQUIRED_COLUMNS[0]) from None
    header = [h.strip() for h in header]
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise MissingColumnError(col)
    extra = [h for h in header if h not in REQUIRED_COLUMNS and not h.startswith(HP_PREFIX)]
    if extra:
        warnings.warn(f"ignoring unknown columns: {', '.join(extra)}", stacklevel=3)

    out = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise RecordParseError(row_no, "<row>", f"expected {len(header)} fields, got {len(row)}")
        values = dict(zip(header, row))
        hp = {h[len(HP_PREFIX):]: values[h] for h in header if h.startswith(HP_PREFIX) and values[h] != ""}
        out.append((row_no, _build(row_no, values, hp)))
    return out


def _parse_jsonl(stream: IO[str]) -> list[tuple[int, ExperimentRecord]]:
    out = []
    for row_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordParseError(row_no, "<line>", f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise RecordParseError(row_no, "<line>", "expected a JSON object")
        for col in REQUIRED_COLUMNS:
            if col not in obj:
                raise RecordParseError(row_no, col, "missing field")
        hp = obj.get("hyperparams") or {}
        if not isinstance(hp, dict):
            raise RecordParseError(row_no, "hyperparams", "expected an object")
        hp = {str(k): str(v) for k, v in hp.items()}
        for k, v in obj.items():
            if k.startswith(HP_PREFIX):
                hp[k[len(HP_PREFIX):]] = str(v)
        out.append((row_no, _build(row_no, obj, hp)))
    return out


def parse_records(data: Union[bytes, str, IO], fmt: str = "csv") -> list[ExperimentRecord]:
    """Parse a CSV or JSONL record stream.

    Raises RecordParseError (with the 1-based line number), RecordRangeError for
    accuracies outside [0, 1], MissingColumnError and DuplicateIdError.
    """
    fmt = fmt.lower()
    stream = _text_stream(data)
    if fmt == "csv":
        numbered = _parse_csv(stream)
    elif fmt == "jsonl":
        numbered = _parse_jsonl(stream)
    else:
        raise ValueError(f"unknown record format {fmt!r}")
    seen = set()
    for row_no, rec in numbered:
        if rec.experiment_id in seen:
            raise DuplicateIdError(row_no, rec.experiment_id)
        seen.add(rec.experiment_id)
    return [rec for _, rec in numbered]


def read_records(path, fmt: Optional[str] = None) -> list[ExperimentRecord]:
    path = str(path)
    if fmt is None:
        fmt = "jsonl" if path.endswith((".jsonl", ".ndjson")) else "csv"
    with open(path, "rb") as fh:
        return parse_records(fh.read(), fmt)


def serialize_records(records: Sequence[ExperimentRecord], fmt: str = "csv") -> str:
    """Inverse of parse_records. Floats are written with repr() so round trips are exact."""
    fmt = fmt.lower()
    if fmt == "jsonl":
        lines = []
        for r in records:
            obj = {c: getattr(r, c) for c in REQUIRED_COLUMNS}
            if r.hyperparams:
                obj["hyperparams"] = dict(sorted(r.hyperparams.items()))
            lines.append(json.dumps(obj, sort_keys=False))
        return "".join(line + "\n" for line in lines)
    if fmt != "csv":
        raise ValueError(f"unknown record format {fmt!r}")
    hp_keys = sorted({k for r in records for k in r.hyperparams})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(REQUIRED_COLUMNS) + [HP_PREFIX + k for k in hp_keys])
    for r in records:
        writer.writerow(
            [r.experiment_id, r.arch_family, r.upstream_task, r.downstream_task, r.shots,
             repr(r.upstream_accuracy), repr(r.downstream_accuracy)]
            + [r.hyperparams.get(k, "") for k in hp_keys]
        )
    return buf.getvalue()


# --- accuracy scales -------------------------------------------------------

class ScaleKind(enum.Enum):
    LINEAR = "linear"
    LOGIT = "logit"
    NEG_LOG_COMPLEMENT = "neglog"

    @classmethod
    def parse(cls, name: str) -> "ScaleKind":
        aliases = {"linear": cls.LINEAR, "logit": cls.LOGIT, "neglog": cls.NEG_LOG_COMPLEMENT,
                   "neg_log_complement": cls.NEG_LOG_COMPLEMENT, "log": cls.NEG_LOG_COMPLEMENT}
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown scale {name!r}") from None


def to_error(accuracy: float) -> float:
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy {accuracy} outside [0, 1]")
    return 1.0 - accuracy


def scale_accuracy(p: float, kind: ScaleKind) -> float:
    if kind is ScaleKind.LINEAR:
        return p
    if kind is ScaleKind.LOGIT:
        if not 0.0 < p < 1.0:
            raise ScaleDomainError(f"logit undefined at p={p}")
        return math.log(p) - math.log1p(-p)
    if kind is ScaleKind.NEG_LOG_COMPLEMENT:
        if not 0.0 <= p < 1.0:
            raise ScaleDomainError(f"-log(1-p) undefined at p={p}")
        return -math.log1p(-p)
    raise TypeError(f"not a ScaleKind: {kind!r}")


def unscale_accuracy(v: float, kind: ScaleKind) -> float:
    if kind is ScaleKind.LINEAR:
        return v
    if kind is ScaleKind.LOGIT:
        # numerically stable logistic
        if v >= 0:
            return 1.0 / (1.0 + math.exp(-v))
        z = math.exp(v)
        return z / (1.0 + z)
    if kind is ScaleKind.NEG_LOG_COMPLEMENT:
        return -math.expm1(-v)
    raise TypeError(f"not a ScaleKind: {kind!r}")

import json
import math
from dataclasses import asdict, is_dataclass
from typing import Any


def format_log_line(tag: str, record: Any) -> str:
    """Render a record as `[tag] {json}` on a single line."""
    payload = asdict(record) if is_dataclass(record) else dict(record)
    return f"[{tag}] {json.dumps(_jsonable(payload))}"


def parse_log_line(line: str) -> tuple[str, dict[str, Any]]:
    tag, _, body = line.strip().partition("] ")
    return tag.lstrip("["), json.loads(body)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if hasattr(value, "tolist"):
        return _jsonable(value.tolist())
    if hasattr(value, "value") and not isinstance(value, (int, float, str)):
        return value.value
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value

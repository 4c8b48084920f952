"""
Metrics recorder
Collects run records in emission order and persists them as JSON lines
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

SCHEMA_VERSION = 1


def dump_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(',', ':'), allow_nan=False)


class MetricsRecorder:
    """Append-only record log for one run"""

    def __init__(self):
        self.records: List[Dict[str, Any]] = []

    def emit(self, record: Dict[str, Any]) -> None:
        self.records.append(record)

    def of_type(self, record_type: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r.get('type') == record_type]

    def first(self, record_type: str) -> Optional[Dict[str, Any]]:
        for record in self.records:
            if record.get('type') == record_type:
                return record
        return None

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', encoding='utf-8', newline='\n') as handle:
            for record in self.records:
                handle.write(dump_record(record) + '\n')
        return path


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with Path(path).open('r', encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]


def write_json(path: Union[str, Path], document: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + '\n', encoding='utf-8')
    return path


def iter_records(records: Iterable[Dict[str, Any]], *types: str) -> Iterable[Dict[str, Any]]:
    return (r for r in records if r.get('type') in types)

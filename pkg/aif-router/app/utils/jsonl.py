"""Line-delimited JSON 讀寫（orjson）"""

import threading
from pathlib import Path
from typing import Any, Iterator, Optional

import orjson

_OPTIONS = orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_APPEND_NEWLINE


class JsonlWriter:
    """Append-only 寫入器；path 為 None 時不做任何事"""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self._fh = None
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "ab")

    @property
    def enabled(self) -> bool:
        return self._fh is not None

    def write(self, record: Any):
        if self._fh is None:
            return
        line = orjson.dumps(record, option=_OPTIONS)
        with self._lock:
            self._fh.write(line)

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> Iterator[Any]:
    with open(path, "rb") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield orjson.loads(line)

import json
import os
import sys
from pathlib import Path


def write_result(name: str, result: dict) -> Path:
    root = Path(os.environ.get("SPES_METRICS", "metrics"))
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"{name}.json"
    path.write_text(json.dumps(result, indent=2, default=float))
    return path


def finish(name: str, result: dict) -> None:
    path = write_result(name, result)
    print(f"{name}: {'PASS' if result['ok'] else 'FAIL'} ({path})")
    sys.exit(0 if result["ok"] else 1)

"""Validate experiment reports against docs/report.schema.json and check row sums."""

import json
import sys
from pathlib import Path

import jsonschema


def main() -> int:
    schema = json.loads(Path(sys.argv[1]).read_text())
    reports = [Path(p) for p in sys.argv[2:]]
    if not reports:
        print("no reports given", file=sys.stderr)
        return 1
    for path in reports:
        report = json.loads(path.read_text())
        jsonschema.validate(report, schema)
        rows = report["confusion"]["matrix"]
        labels = report["confusion"]["labels"]
        for label, row in zip(labels, rows):
            if sum(row) != report["per_category"][label]["trials"]:
                raise AssertionError(f"{path}: confusion row {label} does not sum to its trials")
        if sum(map(sum, rows)) != report["trials"]:
            raise AssertionError(f"{path}: confusion total differs from trials")
        print(f"{path.name}: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Validate probe report JSON files against schemas/probe_report.schema.json."""

import json
import pathlib
import sys

import jsonschema

SCHEMA = pathlib.Path(__file__).resolve().parent.parent / "schemas" / "probe_report.schema.json"


def main(paths):
    schema = json.loads(SCHEMA.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    for p in paths:
        jsonschema.validate(json.loads(pathlib.Path(p).read_text()), schema)
        print(f"{p}: valid")


if __name__ == "__main__":
    main(sys.argv[1:])

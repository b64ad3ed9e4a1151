"""Runs a short experiment and validates summary.json against docs/summary.schema.json."""
import json
import math
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema

exe, schema_path = sys.argv[1], Path(sys.argv[2])
schema = json.loads(schema_path.read_text())

with tempfile.TemporaryDirectory() as out:
    subprocess.run([exe, "--dataset", "synth_spurious", "--algo", "fishr_inter_geo", "--rounds", "10",
                    "--seeds", "0,1", "--out", out], check=True, stdout=subprocess.DEVNULL)
    files = sorted(p.name for p in Path(out).iterdir())
    assert files == ["rounds_seed0.csv", "rounds_seed1.csv", "summary.json"], files
    summary = json.loads((Path(out) / "summary.json").read_text())
    jsonschema.validate(summary, schema)

    def finite(x):
        if isinstance(x, dict):
            return all(finite(v) for v in x.values())
        if isinstance(x, list):
            return all(finite(v) for v in x)
        if isinstance(x, float):
            return math.isfinite(x)
        return x is not None

    assert finite(summary), "summary has null or non-finite fields"
print("summary.json matches the schema")

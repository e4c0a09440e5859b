"""Regenerate pilot_step_invariance.json: python tests/fixtures/make_pilot_fixture.py

Runs the desk-scale recipe once (gen-data, train, K sweep with prior S) and
records the measured aggregates next to the acceptance thresholds. The
thresholds themselves are fixed; the measurements document the margin.
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from desk import FIXTURE, load_fixture, step_sweep, train_desk_model  # noqa: E402


def main():
    doc = load_fixture()
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        ckpt, timings = train_desk_model(doc["recipe"], root)
        result, elapsed = step_sweep(doc["recipe"], root, ckpt, doc["k_list"])
    timings["sweep"] = elapsed
    doc["pilot"] = dict(result, timings_s={k: round(v, 1) for k, v in timings.items()})
    FIXTURE.write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc["pilot"], indent=2))


if __name__ == "__main__":
    main()

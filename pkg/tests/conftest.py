import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pulsecw import framesio
from pulsecw.cli import main
from pulsecw.physim import AcquisitionConfig, SimulationTruth, SourceConfig, simulate_frames, truth_path


@pytest.fixture(scope="session")
def matched_run(tmp_path_factory):
    """Full simulate -> analyze -> tomo chain with the bundled matched config."""
    d = tmp_path_factory.mktemp("matched")
    frames = d / "frames.bin"
    assert main(["simulate", "--config", "bundled:paper_matched", "--out", str(frames)]) == 0
    assert main(["analyze", str(frames), "--out", str(d / "analysis")]) == 0
    assert main(["tomo", str(d / "analysis" / "quadratures.csv"), "--out", str(d / "tomo")]) == 0
    return {
        "dir": d,
        "frames": frames,
        "truth": SimulationTruth.read_csv(truth_path(frames)),
        "analysis": json.loads((d / "analysis" / "analysis.json").read_text()),
        "result": json.loads((d / "tomo" / "result.json").read_text()),
    }


@pytest.fixture(scope="session")
def matched_batch(matched_run):
    return framesio.read_frames(matched_run["frames"])


@pytest.fixture(scope="session")
def small_batch():
    """4000 frames of the default acquisition, held in memory."""
    acq = replace(AcquisitionConfig(), dark_fraction=0.05)
    batch, truth = simulate_frames(SourceConfig(), acq, np.arange(4000), 123)
    return acq, batch, truth

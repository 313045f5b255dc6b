"""
Key rate against distance
=========================

The COW key rate couples the detector to the link: a short deadtime
counts fast but lets afterpulses in, a long one suppresses them at the
cost of saturation. We scan the four reference detectors.
"""
from pathlib import Path

import numpy as np

from spadlab.qkd import scan_distance
from spadlab.reproduce import REFERENCE_IDS, load_reference

refs = load_reference(Path(__file__).resolve().parents[1] / "configs")
link = refs["rapid-50ns"].link
print(f"link: mean photons {link.mean_photons}, visibility {link.visibility:.4f}")

grid = np.arange(0.0, 401.0, 5.0)
scans = scan_distance([(k, refs[k].detector) for k in REFERENCE_IDS], link, grid)
for s in scans:
    at = dict(zip(s.distances, s.secure_rates))
    print(f"{s.detector_id:18s} 20 km {at[20.0] / 1e3:8.1f} kbps   100 km {at[100.0] / 1e3:7.2f} kbps"
          f"   max distance {s.max_distance:6.1f} km")

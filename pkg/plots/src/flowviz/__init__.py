"""Figure scripts for flowtemper run artifacts.

These scripts only read the documented CSV/JSON artifact schemas and render
images; they never recompute inference quantities.
"""

import matplotlib

matplotlib.use("Agg")

__version__ = "0.1.0"

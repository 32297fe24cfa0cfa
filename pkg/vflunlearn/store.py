import json
import os
from typing import Any, Dict, List

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from vflunlearn.exceptions import MissingArtifactError

MANIFEST = "manifest.json"


def _to_builtin(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _finite_or_null(value: Any):
    # NaN and infinities are not valid JSON; they become null
    if isinstance(value, dict):
        return {str(k): _finite_or_null(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_null(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return None
    return value


class ArtifactStore:
    """Single writer for the files of one run directory.

    Every file written through the store is recorded so the manifest, which
    is written last, can list the complete set of artifacts.

    Attributes:
        run_dir (str): Directory all artifacts are written to.
        files (List[str]): Artifact paths relative to ``run_dir``, in write order.
    """

    def __init__(self, run_dir: str) -> None:
        """Create the run directory if it does not exist yet.

        Args:
            run_dir: Directory for this run's artifacts.
        """
        self.run_dir = run_dir
        self.files: List[str] = []
        os.makedirs(run_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def _record(self, name: str) -> str:
        if name not in self.files:
            self.files.append(name)
        return self.path(name)

    def track(self, name: str) -> None:
        """Record a file written by someone else (e.g. a log file) as an artifact."""
        self._record(name)

    def write_csv(self, name: str, df: pd.DataFrame) -> str:
        """Write a DataFrame as CSV with empty fields for missing values.

        Args:
            name: File name inside the run directory.
            df: The table to write.

        Returns:
            str: The written path.
        """
        path = self._record(name)
        df.to_csv(path, index=False, na_rep="")
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        path = self._record(name)
        with open(path, "w") as f:
            json.dump(_finite_or_null(payload), f, indent=2, sort_keys=True, default=_to_builtin)
        return path

    def save_figure(self, name: str, fig: Figure) -> str:
        """Save a matplotlib figure as standalone SVG."""
        path = self._record(name)
        fig.savefig(path, format="svg", metadata={"Date": None})
        return path

    def write_manifest(self, payload: Dict[str, Any]) -> str:
        """Write manifest.json listing every artifact recorded so far.

        Must be the last write of a run: its presence marks the run complete.
        """
        manifest = dict(payload)
        manifest["files"] = list(self.files)
        return self.write_json(MANIFEST, manifest)

    @staticmethod
    def read_manifest(run_dir: str) -> Dict[str, Any]:
        """Load the manifest of a finished run.

        Raises:
            MissingArtifactError: If the run has no manifest.
        """
        path = os.path.join(run_dir, MANIFEST)
        if not os.path.exists(path):
            raise MissingArtifactError("run is incomplete, missing manifest", [path])
        with open(path) as f:
            return json.load(f)
